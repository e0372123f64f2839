"""AC optimal power flow in polar voltages with an optional reserve model.

The model is assembled from blocks so that the stability-constrained and
active-search variants can reuse the same feasible set:

* variables ``(g, r, [h], V, theta without the reference bus)`` plus any
  auxiliary variables appended by extensions,
* equality rows: real and reactive balance ``d - M g + p(V, theta) = 0`` and
  ``l - M r + q(V, theta) = 0`` (duals are the bus prices),
* inequality rows: squared apparent-power limits at both branch ends and,
  in ``relaxed-inequalities`` mode, ``h <= h_max`` and ``h <= g_max - g``.

The internal objective is generation cost divided by ``base_mva`` so that
gradients are O($/MWh); balance duals are rescaled to $/pu-h on output.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nlp
from .network import Generator, NetworkCase, admittance_matrix
from .powerflow import flow_terms, injection_terms, solve_power_flow

RESERVE_MODES = ("absent", "relaxed-inequalities", "equality-min")


def max_reserve(gen: Generator, nominal_hz: float, min_hz: float) -> float:
    """Largest droop reserve a unit can deliver at the minimum frequency.

    Returned in the generator's own units (MW for file data).
    """
    if not gen.droop > 0:
        raise ValueError(f"generator {gen.id}: droop must be positive")
    if not nominal_hz > 0 or min_hz > nominal_hz:
        raise ValueError("need nominal_hz > 0 and min_hz <= nominal_hz")
    return gen.gmax * (nominal_hz - min_hz) / (gen.droop * nominal_hz)


@dataclass
class ReserveModel:
    h_max: np.ndarray  # pu
    mode: str = "absent"

    def __post_init__(self):
        self.h_max = np.asarray(self.h_max, float)
        if self.mode not in RESERVE_MODES:
            raise ValueError(f"unknown reserve mode {self.mode!r}")
        if np.any(self.h_max < 0):
            raise ValueError("h_max must be non-negative")

    @classmethod
    def for_case(cls, case: NetworkCase, mode: str = "absent") -> "ReserveModel":
        hm = np.array([max_reserve(g, case.nominal_hz, case.min_hz) for g in case.generators]) / case.base_mva
        return cls(hm, mode)

    def evaluate(self, case: NetworkCase, g: np.ndarray) -> np.ndarray:
        """Reserve implied by the non-smooth rule h = min(h_max, g_max - g)."""
        return np.minimum(self.h_max, case.gmax - np.asarray(g))


# ---------------------------------------------------------------------
# variable layout

class OpfLayout:
    def __init__(self, case: NetworkCase, with_reserve: bool):
        n, m = case.n_bus, case.n_gen
        self.n_bus, self.n_gen = n, m
        self.ref = case.ref_bus
        self.nonref = np.array([i for i in range(n) if i != self.ref], int)
        k = 0
        self.g = slice(k, k + m); k += m
        self.r = slice(k, k + m); k += m
        if with_reserve:
            self.h = slice(k, k + m); k += m
        else:
            self.h = None
        self.V = slice(k, k + n); k += n
        self.th = slice(k, k + n - 1); k += n - 1
        self.n = k
        # map [V (n), theta (n)] derivative columns to variable indices (-1 = reference angle)
        cols = np.r_[np.arange(self.V.start, self.V.stop), np.full(n, -1)]
        cols[n + self.nonref] = np.arange(self.th.start, self.th.stop)
        self.vt_cols = cols
        self.vt_valid = cols >= 0

    def unpack(self, z):
        g = z[self.g]
        r = z[self.r]
        h = z[self.h] if self.h is not None else None
        V = z[self.V]
        th = np.zeros(self.n_bus)
        th[self.nonref] = z[self.th]
        return g, r, h, V, th

    def pack(self, g, r, h, V, th, total=None):
        z = np.zeros(total or self.n)
        z[self.g] = g
        z[self.r] = r
        if self.h is not None:
            z[self.h] = 0.0 if h is None else h
        z[self.V] = V
        z[self.th] = np.asarray(th)[self.nonref]
        return z

    def scatter_vt(self, Jvt, width):
        """Place a [V, theta] Jacobian into model columns."""
        J = np.zeros((Jvt.shape[0], width))
        J[:, self.vt_cols[self.vt_valid]] = Jvt[:, self.vt_valid]
        return J

    def scatter_vt_hess(self, Hvt, width):
        H = np.zeros((width, width))
        idx = self.vt_cols[self.vt_valid]
        H[np.ix_(idx, idx)] = Hvt[np.ix_(self.vt_valid, self.vt_valid)]
        return H


# ---------------------------------------------------------------------
# blocks

class Block:
    """A group of constraint rows ``c(z)`` with Jacobian and weighted Hessian."""
    n_rows = 0

    def values(self, z):  # pragma: no cover - interface
        raise NotImplementedError

    def hessian(self, z, w):  # pragma: no cover - interface
        raise NotImplementedError


class BalanceBlock(Block):
    def __init__(self, model: "OpfModel"):
        self.m = model
        self.terms = model.inj_terms
        self.n_rows = 2 * model.case.n_bus

    def values(self, z):
        m = self.m
        lay, case = m.layout, m.case
        g, r, h, V, th = lay.unpack(z)
        P, Q = self.terms.values(V, th)
        c = np.r_[m.d - case.M @ g + P, m.l - case.M @ r + Q]
        dP, dQ = self.terms.jacobian(V, th)
        J = lay.scatter_vt(np.vstack([dP, dQ]), m.n_var)
        n = case.n_bus
        J[:n, lay.g] = -case.M
        J[n:, lay.r] = -case.M
        return c, J

    def hessian(self, z, w):
        m = self.m
        lay = m.layout
        n = m.case.n_bus
        g, r, h, V, th = lay.unpack(z)
        return lay.scatter_vt_hess(self.terms.hessian(V, th, w[:n], w[n:]), m.n_var)


class FlowLimitBlock(Block):
    """P^2 + Q^2 - smax^2 <= 0 at both ends of every finitely rated branch."""

    def __init__(self, model: "OpfModel"):
        self.m = model
        case = model.case
        smax = np.array([br.smax for br in case.branches], float) / case.base_mva
        self.rated = np.flatnonzero(np.isfinite(smax))
        self.smax2 = smax[self.rated] ** 2
        self.ft, self.tt = model.flow_terms
        self.n_rows = 2 * len(self.rated)

    def _flows(self, V, th):
        out = []
        for terms in (self.ft, self.tt):
            P, Q = terms.values(V, th)
            dP, dQ = terms.jacobian(V, th)
            k = self.rated
            out.append((P[k], Q[k], dP[k], dQ[k]))
        return out

    def values(self, z):
        lay = self.m.layout
        g, r, h, V, th = lay.unpack(z)
        vals, jacs = [], []
        for P, Q, dP, dQ in self._flows(V, th):
            vals.append(P**2 + Q**2 - self.smax2)
            jacs.append(2 * P[:, None] * dP + 2 * Q[:, None] * dQ)
        return np.concatenate(vals), lay.scatter_vt(np.vstack(jacs), self.m.n_var)

    def hessian(self, z, w):
        lay = self.m.layout
        g, r, h, V, th = lay.unpack(z)
        nr = len(self.rated)
        Hvt = np.zeros((2 * self.m.case.n_bus,) * 2)
        for side, (terms, (P, Q, dP, dQ)) in enumerate(zip((self.ft, self.tt), self._flows(V, th))):
            ws = w[side * nr:(side + 1) * nr]
            full_wP = np.zeros(terms.n_rows)
            full_wQ = np.zeros(terms.n_rows)
            full_wP[self.rated] = 2 * ws * P
            full_wQ[self.rated] = 2 * ws * Q
            Hvt += terms.hessian(V, th, full_wP, full_wQ)
            Hvt += 2 * (dP.T * ws) @ dP + 2 * (dQ.T * ws) @ dQ
        return lay.scatter_vt_hess(Hvt, self.m.n_var)


class ReserveBlock(Block):
    """h - h_max <= 0 and h + g - g_max <= 0 for every generator."""

    def __init__(self, model: "OpfModel"):
        self.m = model
        self.n_rows = 2 * model.case.n_gen

    def values(self, z):
        m = self.m
        lay = m.layout
        g, h = z[lay.g], z[lay.h]
        mg = m.case.n_gen
        c = np.r_[h - m.reserve.h_max, h + g - m.case.gmax]
        J = np.zeros((2 * mg, m.n_var))
        eye = np.eye(mg)
        J[:mg, lay.h] = eye
        J[mg:, lay.h] = eye
        J[mg:, lay.g] = eye
        return c, J

    def hessian(self, z, w):
        return None


class CostObjective:
    def __init__(self, model: "OpfModel"):
        self.m = model
        case = model.case
        base = case.base_mva
        self.q = np.array([gen.c2 for gen in case.generators]) * base  # per pu^2 after /base
        self.lin = np.array([gen.c1 for gen in case.generators])
        self.const = np.array([gen.c0 for gen in case.generators]).sum() / base

    def value_grad(self, z):
        lay = self.m.layout
        g = z[lay.g]
        f = float(self.q @ g**2 + self.lin @ g + self.const)
        grad = np.zeros(self.m.n_var)
        grad[lay.g] = 2 * self.q * g + self.lin
        return f, grad

    def hessian(self, z):
        H = np.zeros((self.m.n_var,) * 2)
        lay = self.m.layout
        idx = np.arange(lay.g.start, lay.g.stop)
        H[idx, idx] = 2 * self.q
        return H


# ---------------------------------------------------------------------
# model

class OpfModel:
    """AC-OPF feasible set over one load vector, open to extension."""

    def __init__(self, case: NetworkCase, reserve: ReserveModel | None = None, load=None):
        self.case = case
        self.reserve = reserve or ReserveModel.for_case(case, "absent")
        if self.reserve.mode == "equality-min":
            raise ValueError("equality-min reserve is for post-hoc evaluation only; use relaxed-inequalities")
        with_h = self.reserve.mode == "relaxed-inequalities"
        self.layout = OpfLayout(case, with_h)
        self.n_var = self.layout.n
        if load is None:
            load = case.load_pu
        self.d = np.asarray(load[0], float)
        self.l = np.asarray(load[1], float)
        self.Y = admittance_matrix(case)
        self.inj_terms = injection_terms(case, self.Y)
        self.flow_terms = flow_terms(case)

        lay = self.layout
        lb = np.full(self.n_var, -np.inf)
        ub = np.full(self.n_var, np.inf)
        lb[lay.g], ub[lay.g] = case.gmin, case.gmax
        lb[lay.r], ub[lay.r] = case.rmin, case.rmax
        if lay.h is not None:
            lb[lay.h] = 0.0
        lb[lay.V], ub[lay.V] = case.vmin, case.vmax
        self.lb, self.ub = lb, ub

        self.eq_blocks: list[Block] = [BalanceBlock(self)]
        self.ineq_blocks: list[Block] = []
        flows = FlowLimitBlock(self)
        if flows.n_rows:
            self.ineq_blocks.append(flows)
        if with_h:
            self.ineq_blocks.append(ReserveBlock(self))
        self.objective = CostObjective(self)

    # extension API
    def add_variables(self, n: int, lb=-np.inf, ub=np.inf) -> slice:
        sl = slice(self.n_var, self.n_var + n)
        self.n_var += n
        self.lb = np.r_[self.lb, np.broadcast_to(lb, (n,))]
        self.ub = np.r_[self.ub, np.broadcast_to(ub, (n,))]
        return sl

    def row_offsets(self, blocks, target):
        k = 0
        for b in blocks:
            if b is target:
                return slice(k, k + b.n_rows)
            k += b.n_rows
        raise KeyError("block not in model")

    @property
    def n_eq(self):
        return sum(b.n_rows for b in self.eq_blocks)

    @property
    def n_ineq(self):
        return sum(b.n_rows for b in self.ineq_blocks)

    def _stack(self, blocks, z):
        if not blocks:
            return np.zeros(0), np.zeros((0, self.n_var))
        cs, Js = zip(*(b.values(z) for b in blocks))
        return np.concatenate(cs), np.vstack(Js)

    def problem(self) -> nlp.NlpProblem:
        obj = self.objective

        def hessian(z, of, yE, yI):
            H = of * obj.hessian(z) if of else np.zeros((self.n_var,) * 2)
            k = 0
            for blocks, y in ((self.eq_blocks, yE), (self.ineq_blocks, yI)):
                k = 0
                for b in blocks:
                    w = y[k:k + b.n_rows]
                    k += b.n_rows
                    if np.any(w):
                        Hb = b.hessian(z, w)
                        if Hb is not None:
                            H += Hb
            return H

        nE, nI = self.n_eq, self.n_ineq
        return nlp.NlpProblem(
            n=self.n_var, lb=self.lb.copy(), ub=self.ub.copy(),
            objective=obj.value_grad,
            n_eq=nE, eq=(lambda z: self._stack(self.eq_blocks, z)) if nE else None,
            n_ineq=nI, ineq=(lambda z: self._stack(self.ineq_blocks, z)) if nI else None,
            hessian=hessian,
        )

    def flat_start(self) -> np.ndarray:
        case, lay = self.case, self.layout
        g = 0.5 * (case.gmin + case.gmax)
        r = 0.5 * (case.rmin + case.rmax)
        h = 0.5 * self.reserve.h_max if lay.h is not None else None
        V = np.clip(np.ones(case.n_bus), case.vmin, case.vmax)
        z = np.zeros(self.n_var)
        z[: lay.n] = lay.pack(g, r, h, V, np.zeros(case.n_bus))
        return z


def build_acopf(case: NetworkCase, reserve: ReserveModel | None = None, load=None) -> nlp.NlpProblem:
    return OpfModel(case, reserve, load).problem()


# ---------------------------------------------------------------------
# solutions

@dataclass
class DispatchSolution:
    g: np.ndarray
    r: np.ndarray
    h: Optional[np.ndarray]
    p: np.ndarray
    q: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    lam: np.ndarray  # $/pu-h
    mu: np.ndarray  # $/pu-h
    objective: float  # $/h
    status: str
    d: np.ndarray
    l: np.ndarray
    kkt_residual: float = float("nan")
    iterations: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == nlp.LOCALLY_SOLVED


def interpret(model: OpfModel, res: nlp.SolveResult) -> DispatchSolution:
    case, lay = model.case, model.layout
    z = res.x
    g, r, h, V, th = lay.unpack(z)
    P, Q = model.inj_terms.values(V, th)
    n = case.n_bus
    sl = model.row_offsets(model.eq_blocks, model.eq_blocks[0])
    y = res.y_eq[sl]
    base = case.base_mva
    return DispatchSolution(
        g=g.copy(), r=r.copy(), h=None if h is None else h.copy(), p=P, q=Q, V=V.copy(), theta=th,
        lam=y[:n] * base, mu=y[n:] * base, objective=case.cost(g), status=res.status,
        d=model.d.copy(), l=model.l.copy(), kkt_residual=res.kkt_residual,
        iterations=res.iterations, wall_time=res.wall_time,
    )


def solve_acopf(case: NetworkCase, opts: nlp.SolveOptions | None = None, *, load=None,
                reserve: ReserveModel | None = None, start=None) -> DispatchSolution:
    model = OpfModel(case, reserve, load)
    res = nlp.solve(model.problem(), model.flat_start() if start is None else start, opts)
    return interpret(model, res)


def dispatch_from_power_flow(case: NetworkCase, g, vset, load=None) -> DispatchSolution:
    """Dispatch at the power-flow solution for outputs ``g`` and voltage set points.

    The slack unit absorbs the mismatch; no limits are enforced and bus
    prices are zero.  Raises ``PowerFlowDiverged`` if Newton fails.
    """
    d, l = case.load_pu if load is None else (np.asarray(v, float) for v in load)
    V, th, g_out, r_out = solve_power_flow(case, g, vset, d, l)
    P, Q = injection_terms(case).values(V, th)
    n = case.n_bus
    return DispatchSolution(g=g_out, r=r_out, h=None, p=P, q=Q, V=V, theta=th, lam=np.zeros(n), mu=np.zeros(n),
                            objective=case.cost(g_out), status="power-flow", d=np.array(d), l=np.array(l))


def within_limits(case: NetworkCase, sol: DispatchSolution, tol: float = 1e-6) -> bool:
    """Generator and voltage bounds hold at ``sol`` (branch limits not checked)."""
    return bool(np.all(sol.g >= case.gmin - tol) and np.all(sol.g <= case.gmax + tol)
                and np.all(sol.r >= case.rmin - tol) and np.all(sol.r <= case.rmax + tol)
                and np.all(sol.V >= case.vmin - tol) and np.all(sol.V <= case.vmax + tol))


def power_flow_residual(case: NetworkCase, point: DispatchSolution) -> np.ndarray:
    """Per-bus residuals [d - M g + p(V,theta); l - M r + q(V,theta)] at ``point``."""
    P, Q = injection_terms(case).values(np.asarray(point.V, float), np.asarray(point.theta, float))
    return np.r_[point.d - case.M @ point.g + P, point.l - case.M @ point.r + Q]


# ---------------------------------------------------------------------
# text serialization (same line style as case files)

_DISPATCH_VECTORS = ("g", "r", "h", "p", "q", "V", "theta", "lam", "mu", "d", "l")


def _fmt(v) -> str:
    return format(float(v), ".17g")


def serialize_dispatch(sol: DispatchSolution, case: NetworkCase) -> str:
    lines = [f"status {sol.status}", f"objective {_fmt(sol.objective)}",
             f"kkt_residual {_fmt(sol.kkt_residual)}", f"iterations {sol.iterations}"]
    for j, gen in enumerate(case.generators):
        h = "nan" if sol.h is None else _fmt(sol.h[j])
        lines.append(f"gen id={gen.id} g={_fmt(sol.g[j])} r={_fmt(sol.r[j])} h={h}")
    for i, bus in enumerate(case.buses):
        lines.append(
            f"bus id={bus.id} V={_fmt(sol.V[i])} theta={_fmt(sol.theta[i])} p={_fmt(sol.p[i])} "
            f"q={_fmt(sol.q[i])} lam={_fmt(sol.lam[i])} mu={_fmt(sol.mu[i])} d={_fmt(sol.d[i])} l={_fmt(sol.l[i])}"
        )
    for k, v in sorted(sol.extra.items()):
        if isinstance(v, (int, float, np.floating)):
            lines.append(f"extra {k}={_fmt(v)}")
    return "# per-unit quantities; prices in $/pu-h\n" + "\n".join(lines) + "\n"


def parse_dispatch(text: str, case: NetworkCase) -> DispatchSolution:
    n, m = case.n_bus, case.n_gen
    vec = {k: np.full(n if k not in ("g", "r", "h") else m, np.nan) for k in _DISPATCH_VECTORS}
    head = {"status": "unknown", "objective": np.nan, "kkt_residual": np.nan, "iterations": 0}
    extra = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kw, *rest = line.split()
        if kw in head:
            head[kw] = rest[0] if kw == "status" else (int(rest[0]) if kw == "iterations" else float(rest[0]))
            continue
        kv = dict(tok.split("=", 1) for tok in rest)
        if kw == "gen":
            j = [g.id for g in case.generators].index(int(kv["id"]))
            for key in ("g", "r", "h"):
                vec[key][j] = float(kv[key])
        elif kw == "bus":
            i = case.bus_index[int(kv["id"])]
            for key in ("V", "theta", "p", "q", "lam", "mu", "d", "l"):
                vec[key][i] = float(kv[key])
        elif kw == "extra":
            for k, v in kv.items():
                extra[k] = float(v)
        else:
            raise ValueError(f"line {lineno}: unknown record {kw!r}")
    h = None if np.all(np.isnan(vec["h"])) else vec["h"]
    return DispatchSolution(g=vec["g"], r=vec["r"], h=h, p=vec["p"], q=vec["q"], V=vec["V"], theta=vec["theta"],
                            lam=vec["lam"], mu=vec["mu"], objective=float(head["objective"]), status=head["status"],
                            d=vec["d"], l=vec["l"], kkt_residual=float(head["kkt_residual"]),
                            iterations=int(head["iterations"]), extra=extra)


def with_status(sol: DispatchSolution, status: str) -> DispatchSolution:
    return replace(sol, status=status)
