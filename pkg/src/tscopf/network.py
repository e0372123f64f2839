"""Grid data model, case-file format and admittance construction.

Case files are line oriented.  Each non-comment line is a record keyword
followed by ``key=value`` fields::

    base_mva 100
    frequency nominal_hz=60 min_hz=58.5
    bus id=1 vmin=0.95 vmax=1.05 zone=1
    branch from=1 to=2 r=0.01 x=0.1 b=0.02 smax=250 tap=1 shift=0
    gen id=1 bus=1 gmin=20 gmax=87.2 rmin=-50 rmax=50 c2=0.01 c1=10 c0=0 droop=0.05 inertia_s=4 damping=1 tgov_s=5
    load bus=2 d_mw=80 l_mvar=20

Power quantities are MW / MVAr / MVA in the file and the dataclasses keep
them that way so that parse/serialize round trips are exact.  Per-unit
arrays for computation are exposed through :class:`NetworkCase` properties.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
import math

import numpy as np


class CaseSyntaxError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class CaseValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Bus:
    id: int
    vmin: float
    vmax: float
    zone: int = 1


@dataclass(frozen=True)
class Branch:
    f_bus: int
    t_bus: int
    r: float
    x: float
    b: float = 0.0
    smax: float = math.inf  # MVA
    tap: float = 1.0
    shift: float = 0.0  # degrees


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    gmin: float  # MW
    gmax: float
    rmin: float  # MVAr
    rmax: float
    c2: float  # $/MW^2h
    c1: float  # $/MWh
    c0: float  # $/h
    droop: float
    inertia_s: float  # on the machine rating (gmax)
    damping: float  # pu on the machine rating
    tgov_s: float


@dataclass(frozen=True)
class LoadPoint:
    bus: int
    d_mw: float
    l_mvar: float


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[LoadPoint, ...]
    nominal_hz: float = 60.0
    min_hz: float = 58.5
    name: str = field(default="", compare=False)

    # -- indexing -----------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def gen_bus_idx(self) -> np.ndarray:
        return np.array([self.bus_index.get(g.bus, -1) for g in self.generators], dtype=int)

    @cached_property
    def zones(self) -> list[int]:
        return sorted({b.zone for b in self.buses})

    @cached_property
    def M(self) -> np.ndarray:
        """Generator-to-bus incidence, n x m."""
        M = np.zeros((self.n_bus, self.n_gen))
        for j, i in enumerate(self.gen_bus_idx):
            if i >= 0:
                M[i, j] = 1.0
        return M

    @cached_property
    def Z(self) -> np.ndarray:
        """Zone incidence, z x m."""
        zpos = {z: k for k, z in enumerate(self.zones)}
        Z = np.zeros((len(self.zones), self.n_gen))
        for j, i in enumerate(self.gen_bus_idx):
            if i >= 0:
                Z[zpos[self.buses[i].zone], j] = 1.0
        return Z

    @cached_property
    def ref_bus(self) -> int:
        """Index of the angle reference: lowest-id bus hosting a generator."""
        ids = [self.buses[i].id for i in self.gen_bus_idx if i >= 0]
        if not ids:
            return 0
        return self.bus_index[min(ids)]

    # -- per-unit arrays ----------------------------------------------
    def _gen_array(self, name: str) -> np.ndarray:
        return np.array([getattr(g, name) for g in self.generators], dtype=float)

    @cached_property
    def gmin(self) -> np.ndarray:
        return self._gen_array("gmin") / self.base_mva

    @cached_property
    def gmax(self) -> np.ndarray:
        return self._gen_array("gmax") / self.base_mva

    @cached_property
    def rmin(self) -> np.ndarray:
        return self._gen_array("rmin") / self.base_mva

    @cached_property
    def rmax(self) -> np.ndarray:
        return self._gen_array("rmax") / self.base_mva

    @cached_property
    def vmin(self) -> np.ndarray:
        return np.array([b.vmin for b in self.buses], dtype=float)

    @cached_property
    def vmax(self) -> np.ndarray:
        return np.array([b.vmax for b in self.buses], dtype=float)

    @cached_property
    def load_pu(self) -> tuple[np.ndarray, np.ndarray]:
        """Nominal (d, l) per bus in pu, aggregated over load records."""
        d = np.zeros(self.n_bus)
        l = np.zeros(self.n_bus)
        for ld in self.loads:
            i = self.bus_index[ld.bus]
            d[i] += ld.d_mw / self.base_mva
            l[i] += ld.l_mvar / self.base_mva
        return d, l

    @property
    def total_load_mw(self) -> float:
        return float(sum(ld.d_mw for ld in self.loads))

    def cost(self, g: np.ndarray) -> float:
        """Total generation cost in $/h for per-unit outputs ``g``."""
        gm = np.asarray(g) * self.base_mva
        return float(np.sum(self._gen_array("c2") * gm**2 + self._gen_array("c1") * gm + self._gen_array("c0")))

    def gen_cost(self, j: int, g_pu: np.ndarray | float) -> np.ndarray | float:
        gen = self.generators[j]
        gm = np.asarray(g_pu) * self.base_mva
        return gen.c2 * gm**2 + gen.c1 * gm + gen.c0


# ---------------------------------------------------------------------
# parsing / serialization

_RECORD_FIELDS = {
    "bus": (Bus, {"id": "id", "vmin": "vmin", "vmax": "vmax", "zone": "zone"}, {"zone"}),
    "branch": (
        Branch,
        {"from": "f_bus", "to": "t_bus", "r": "r", "x": "x", "b": "b", "smax": "smax", "tap": "tap", "shift": "shift"},
        {"b", "smax", "tap", "shift"},
    ),
    "gen": (
        Generator,
        {k: k for k in ("id", "bus", "gmin", "gmax", "rmin", "rmax", "c2", "c1", "c0",
                        "droop", "inertia_s", "damping", "tgov_s")},
        {"c2", "c0", "damping"},
    ),
    "load": (LoadPoint, {"bus": "bus", "d_mw": "d_mw", "l_mvar": "l_mvar"}, set()),
}
_INT_FIELDS = {"id", "zone", "f_bus", "t_bus", "bus"}


def _parse_number(tok: str, lineno: int, integer: bool):
    try:
        if integer:
            v = float(tok)
            if not v.is_integer():
                raise ValueError
            return int(v)
        return float(tok)
    except ValueError:
        raise CaseSyntaxError(lineno, f"expected {'integer' if integer else 'number'}, got {tok!r}") from None


def _parse_kv(tokens: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise CaseSyntaxError(lineno, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k in out:
            raise CaseSyntaxError(lineno, f"duplicate key {k!r}")
        out[k] = v
    return out


def parse_case(text: str, *, check: bool = True, name: str = "") -> NetworkCase:
    """Parse case-file text.

    Raises :class:`CaseSyntaxError` for malformed lines and, when ``check``
    is true, :class:`CaseValidationError` listing every violated invariant.
    """
    base = None
    nominal_hz, min_hz = 60.0, 58.5
    records = {"bus": [], "branch": [], "gen": [], "load": []}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kw, *rest = line.split()
        if kw == "base_mva":
            if len(rest) != 1:
                raise CaseSyntaxError(lineno, "base_mva takes one value")
            base = _parse_number(rest[0], lineno, False)
        elif kw == "frequency":
            kv = _parse_kv(rest, lineno)
            unknown = set(kv) - {"nominal_hz", "min_hz"}
            if unknown:
                raise CaseSyntaxError(lineno, f"unknown frequency field(s) {sorted(unknown)}")
            if "nominal_hz" in kv:
                nominal_hz = _parse_number(kv["nominal_hz"], lineno, False)
            if "min_hz" in kv:
                min_hz = _parse_number(kv["min_hz"], lineno, False)
        elif kw in _RECORD_FIELDS:
            cls, keymap, optional = _RECORD_FIELDS[kw]
            kv = _parse_kv(rest, lineno)
            unknown = set(kv) - set(keymap)
            if unknown:
                raise CaseSyntaxError(lineno, f"unknown {kw} field(s) {sorted(unknown)}")
            missing = set(keymap) - set(kv) - optional
            if missing:
                raise CaseSyntaxError(lineno, f"missing {kw} field(s) {sorted(missing)}")
            args = {}
            for key, attr in keymap.items():
                if key in kv:
                    args[attr] = _parse_number(kv[key], lineno, attr in _INT_FIELDS)
            records[kw].append(cls(**args))
        else:
            raise CaseSyntaxError(lineno, f"unknown record {kw!r}")
    if base is None:
        raise CaseSyntaxError(0, "missing base_mva")
    case = NetworkCase(
        base_mva=base,
        buses=tuple(records["bus"]),
        branches=tuple(records["branch"]),
        generators=tuple(records["gen"]),
        loads=tuple(records["load"]),
        nominal_hz=nominal_hz,
        min_hz=min_hz,
        name=name,
    )
    if check:
        violations = validate_case(case)
        if violations:
            raise CaseValidationError(violations)
    return case


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".17g")


def serialize_case(case: NetworkCase) -> str:
    """Canonical text form: fixed record/field order, 17 significant digits."""
    lines = [f"base_mva {_fmt(case.base_mva)}",
             f"frequency nominal_hz={_fmt(case.nominal_hz)} min_hz={_fmt(case.min_hz)}"]
    for kw, items in (("bus", case.buses), ("branch", case.branches),
                      ("gen", case.generators), ("load", case.loads)):
        keymap = _RECORD_FIELDS[kw][1]
        for item in items:
            parts = [f"{key}={_fmt(getattr(item, attr))}" for key, attr in keymap.items()]
            lines.append(kw + " " + " ".join(parts))
    return "\n".join(lines) + "\n"


def load_case(path) -> NetworkCase:
    with open(path) as fh:
        text = fh.read()
    return parse_case(text, name=str(path))


def bundled_case(name: str) -> NetworkCase:
    """Load one of the fixture cases shipped with the package (e.g. ``"toy9"``)."""
    text = resources.files("tscopf.cases").joinpath(f"{name}.case").read_text()
    return parse_case(text, name=name)


def bundled_case_path(name: str) -> str:
    return str(resources.files("tscopf.cases").joinpath(f"{name}.case"))


# ---------------------------------------------------------------------
# validation

def _finite(*vals) -> bool:
    return all(math.isfinite(v) for v in vals)


def validate_case(case: NetworkCase) -> list[str]:
    """Return human-readable descriptions of every violated invariant."""
    out = []
    if not (case.base_mva > 0):
        out.append("base_mva must be positive")
    if not (case.nominal_hz > case.min_hz >= 0):
        out.append("frequency: need nominal_hz > min_hz >= 0")

    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        out.append("duplicate bus ids")
    if not case.buses:
        out.append("case has no buses")
    for b in case.buses:
        if not (b.vmin > 0):
            out.append(f"bus {b.id}: vmin must be > 0")
        if not (b.vmin <= b.vmax):
            out.append(f"bus {b.id}: vmin > vmax")
    known = set(ids)

    for k, br in enumerate(case.branches):
        tag = f"branch {k + 1} ({br.f_bus}-{br.t_bus})"
        for end in (br.f_bus, br.t_bus):
            if end not in known:
                out.append(f"{tag}: unknown bus {end}")
        if br.f_bus == br.t_bus:
            out.append(f"{tag}: from == to")
        if br.x == 0:
            out.append(f"{tag}: zero reactance")
        if not (br.smax > 0):
            out.append(f"{tag}: smax must be > 0")
        if not _finite(br.r, br.x, br.b, br.tap, br.shift):
            out.append(f"{tag}: non-finite parameter")

    gids = [g.id for g in case.generators]
    if len(set(gids)) != len(gids):
        out.append("duplicate generator ids")
    if not case.generators:
        out.append("case has no generators")
    for g in case.generators:
        tag = f"generator {g.id}"
        if g.bus not in known:
            out.append(f"{tag}: unknown bus {g.bus}")
        if not (g.gmin <= g.gmax):
            out.append(f"{tag}: gmin > gmax")
        if not (g.rmin <= g.rmax):
            out.append(f"{tag}: rmin > rmax")
        if not (g.c2 >= 0):
            out.append(f"{tag}: non-convex cost (c2 < 0)")
        if not (g.droop > 0):
            out.append(f"{tag}: droop must be > 0")
        if not (g.inertia_s > 0):
            out.append(f"{tag}: inertia must be > 0")
        if not (g.tgov_s > 0):
            out.append(f"{tag}: governor time constant must be > 0")
        if not (g.damping >= 0):
            out.append(f"{tag}: damping must be >= 0")

    for ld in case.loads:
        if ld.bus not in known:
            out.append(f"load at bus {ld.bus}: unknown bus {ld.bus}")
        if not _finite(ld.d_mw, ld.l_mvar):
            out.append(f"load at bus {ld.bus}: non-finite value")

    if case.buses and len(set(ids)) == len(ids):
        adj = {i: set() for i in ids}
        for br in case.branches:
            if br.f_bus in adj and br.t_bus in adj:
                adj[br.f_bus].add(br.t_bus)
                adj[br.t_bus].add(br.f_bus)
        seen = {ids[0]}
        queue = deque([ids[0]])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        if len(seen) != len(ids):
            lost = sorted(known - seen)
            out.append(f"island detected: buses {lost} not connected to bus {ids[0]}")
    return out


# ---------------------------------------------------------------------
# admittance

def branch_admittances(case: NetworkCase):
    """Per-branch (Yff, Yft, Ytf, Ytt) and from/to bus indices."""
    nl = len(case.branches)
    Yff = np.zeros(nl, complex)
    Yft = np.zeros(nl, complex)
    Ytf = np.zeros(nl, complex)
    Ytt = np.zeros(nl, complex)
    f = np.zeros(nl, int)
    t = np.zeros(nl, int)
    for k, br in enumerate(case.branches):
        if br.x == 0:
            raise ValueError(f"branch {k + 1} ({br.f_bus}-{br.t_bus}) has zero reactance")
        ys = 1.0 / complex(br.r, br.x)
        tap = br.tap if br.tap != 0 else 1.0
        tc = tap * np.exp(1j * math.radians(br.shift))
        ytt = ys + 0.5j * br.b
        Yff[k] = ytt / (tc * np.conj(tc))
        Yft[k] = -ys / np.conj(tc)
        Ytf[k] = -ys / tc
        Ytt[k] = ytt
        f[k] = case.bus_index[br.f_bus]
        t[k] = case.bus_index[br.t_bus]
    return f, t, Yff, Yft, Ytf, Ytt


def admittance_matrix(case: NetworkCase) -> np.ndarray:
    """Dense complex bus admittance matrix."""
    n = case.n_bus
    Y = np.zeros((n, n), complex)
    f, t, Yff, Yft, Ytf, Ytt = branch_admittances(case)
    np.add.at(Y, (f, f), Yff)
    np.add.at(Y, (f, t), Yft)
    np.add.at(Y, (t, f), Ytf)
    np.add.at(Y, (t, t), Ytt)
    return Y


def with_loads(case: NetworkCase, d_pu: np.ndarray, l_pu: np.ndarray) -> NetworkCase:
    """Copy of ``case`` whose loads are the given per-bus vectors (pu)."""
    loads = tuple(
        LoadPoint(bus=b.id, d_mw=float(d_pu[i] * case.base_mva), l_mvar=float(l_pu[i] * case.base_mva))
        for i, b in enumerate(case.buses)
        if d_pu[i] != 0 or l_pu[i] != 0
    )
    return replace(case, loads=loads)


__all__ = [
    "Bus", "Branch", "Generator", "LoadPoint", "NetworkCase",
    "CaseSyntaxError", "CaseValidationError",
    "parse_case", "serialize_case", "load_case", "bundled_case", "bundled_case_path",
    "validate_case", "admittance_matrix", "branch_admittances", "with_loads",
]
