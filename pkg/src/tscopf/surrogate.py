"""Classifier input features, their normalization, and the weights file.

Four input sets are supported:

====  ==========================================
A     generator outputs, loads, reactive outputs, reactive loads
B     generator outputs and real loads
C     net real injection at every bus
D     net real injection plus total reserve per zone
====  ==========================================

Raw features are in per-unit; the classifier sees them after a frozen
affine normalization stored on the :class:`FeatureSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .acopf import DispatchSolution, OpfModel, ReserveModel
from .mlp import MlpParams
from .network import NetworkCase
from .powerflow import injection_terms

VARIANTS = {"A": ("g", "d", "r", "l"), "B": ("g", "d"), "C": ("p",), "D": ("p", "zh")}


class MissingReserveError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    variant: str
    slots: tuple  # ((kind, index), ...)
    mean: Optional[tuple] = None
    scale: Optional[tuple] = None

    @classmethod
    def for_case(cls, case: NetworkCase, variant: str) -> "FeatureSpec":
        variant = variant.upper()
        if variant not in VARIANTS:
            raise ValueError(f"unknown input set {variant!r}; expected one of {sorted(VARIANTS)}")
        sizes = {"g": case.n_gen, "r": case.n_gen, "d": case.n_bus, "l": case.n_bus, "p": case.n_bus,
                 "zh": len(case.zones)}
        slots = tuple((kind, i) for kind in VARIANTS[variant] for i in range(sizes[kind]))
        return cls(variant, slots)

    @property
    def dim(self) -> int:
        return len(self.slots)

    @property
    def needs_reserve(self) -> bool:
        return any(k == "zh" for k, _ in self.slots)

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def _arrays(self):
        if not self.fitted:
            return np.zeros(self.dim), np.ones(self.dim)
        return np.asarray(self.mean), np.asarray(self.scale)

    def fit(self, raw: np.ndarray, case: NetworkCase) -> "FeatureSpec":
        """Freeze mean/scale from a sample matrix (rows are samples).

        The scale is the sample standard deviation floored at a quarter of the
        feature's operating range (bounded quantities) or 5% of its mean
        magnitude, so that features nearly constant in the first batch do not
        blow up once later samples move them.
        """
        raw = np.atleast_2d(np.asarray(raw, float))
        mean = raw.mean(0)
        std = raw.std(0)
        floor = np.array([self._floor(case, k, i, mu) for (k, i), mu in zip(self.slots, mean)])
        scale = np.maximum(std, floor)
        return replace(self, mean=tuple(float(v) for v in mean), scale=tuple(float(v) for v in scale))

    @staticmethod
    def _floor(case, kind, i, mu):
        if kind == "g":
            span = case.gmax[i] - case.gmin[i]
        elif kind == "r":
            span = case.rmax[i] - case.rmin[i]
        elif kind == "zh":
            hm = ReserveModel.for_case(case).h_max
            span = float(case.Z[i] @ hm)
        else:
            span = 0.0
        if span > 0:
            return 0.25 * span
        return max(0.05 * abs(mu), 1e-3)

    def normalize(self, raw):
        mean, scale = self._arrays()
        return (np.asarray(raw, float) - mean) / scale

    def denormalize(self, x):
        mean, scale = self._arrays()
        return np.asarray(x, float) * scale + mean

    def positions(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """(feature positions, entity indices) of every slot of ``kind``."""
        pos = [p for p, (k, _) in enumerate(self.slots) if k == kind]
        idx = [self.slots[p][1] for p in pos]
        return np.array(pos, int), np.array(idx, int)


def raw_features(case: NetworkCase, dispatch: DispatchSolution, load, spec: FeatureSpec) -> np.ndarray:
    d, l = (np.asarray(v, float) for v in load)
    src = {"g": dispatch.g, "r": dispatch.r, "d": d, "l": l}
    if any(k == "p" for k, _ in spec.slots):
        V, th = np.asarray(dispatch.V, float), np.asarray(dispatch.theta, float)
        src["p"] = injection_terms(case).values(V, th)[0]
    if spec.needs_reserve:
        if dispatch.h is None:
            raise MissingReserveError("input set D needs reserve values but the dispatch has none")
        src["zh"] = case.Z @ dispatch.h
    return np.array([src[k][i] for k, i in spec.slots], float)


def extract_features(case: NetworkCase, dispatch: DispatchSolution, load, spec: FeatureSpec) -> np.ndarray:
    """Normalized classifier input for ``dispatch`` at ``load``."""
    return spec.normalize(raw_features(case, dispatch, load, spec))


def feature_gradients(spec: FeatureSpec, grad_x: np.ndarray, case: NetworkCase) -> dict:
    """Split d f / d (normalized input) into per-quantity raw-unit gradients.

    Returns arrays for g, r (per generator) and zh (per zone); quantities
    absent from the input set get zeros.
    """
    _, scale = spec._arrays()
    graw = np.asarray(grad_x, float) / scale
    out = {"g": np.zeros(case.n_gen), "r": np.zeros(case.n_gen), "zh": np.zeros(len(case.zones)),
           "d": np.zeros(case.n_bus), "l": np.zeros(case.n_bus), "p": np.zeros(case.n_bus)}
    for p, (k, i) in enumerate(spec.slots):
        out[k][i] = graw[p]
    return out


# ---------------------------------------------------------------------
# features as functions of optimization variables

class FeatureMap:
    """Normalized features as a smooth function of an :class:`OpfModel` point."""

    def __init__(self, model: OpfModel, spec: FeatureSpec):
        self.m = model
        self.spec = spec
        if spec.needs_reserve and model.layout.h is None:
            raise MissingReserveError("input set D needs reserve variables in the model")
        self.mean, self.scale = spec._arrays()
        lay = model.layout
        self.const = np.zeros(spec.dim)
        rows, cols, coef = [], [], []
        self.p_pos, self.p_bus = spec.positions("p")
        Z = model.case.Z
        for pos, (k, i) in enumerate(spec.slots):
            if k == "g":
                rows.append(pos); cols.append(lay.g.start + i); coef.append(1.0)
            elif k == "r":
                rows.append(pos); cols.append(lay.r.start + i); coef.append(1.0)
            elif k == "d":
                self.const[pos] = model.d[i]
            elif k == "l":
                self.const[pos] = model.l[i]
            elif k == "zh":
                for j in np.flatnonzero(Z[i]):
                    rows.append(pos); cols.append(lay.h.start + j); coef.append(1.0)
        self._lin = (np.array(rows, int), np.array(cols, int), np.array(coef))

    def raw(self, z):
        v = self.const.copy()
        r, c, a = self._lin
        np.add.at(v, r, a * z[c])
        if len(self.p_pos):
            _, _, _, V, th = self.m.layout.unpack(z)
            v[self.p_pos] = self.m.inj_terms.values(V, th)[0][self.p_bus]
        return v

    def value(self, z):
        return (self.raw(z) - self.mean) / self.scale

    def jacobian(self, z):
        J = np.zeros((self.spec.dim, self.m.n_var))
        r, c, a = self._lin
        np.add.at(J, (r, c), a)
        if len(self.p_pos):
            lay = self.m.layout
            _, _, _, V, th = lay.unpack(z)
            dP, _ = self.m.inj_terms.jacobian(V, th)
            J[self.p_pos] = lay.scatter_vt(dP[self.p_bus], self.m.n_var)
        return J / self.scale[:, None]

    def hessian(self, z, w):
        """sum_i w_i * Hessian of normalized feature i (only injections are curved)."""
        if not len(self.p_pos):
            return None
        lay = self.m.layout
        _, _, _, V, th = lay.unpack(z)
        wP = np.zeros(self.m.case.n_bus)
        np.add.at(wP, self.p_bus, np.asarray(w)[self.p_pos] / self.scale[self.p_pos])
        Hvt = self.m.inj_terms.hessian(V, th, wP, np.zeros_like(wP))
        return lay.scatter_vt_hess(Hvt, self.m.n_var)


# ---------------------------------------------------------------------
# weights file

def _f(v) -> str:
    return format(float(v), ".17g")


def save_weights(path, params: MlpParams, spec: FeatureSpec) -> None:
    with open(path, "w") as fh:
        fh.write(dump_weights(params, spec))


def dump_weights(params: MlpParams, spec: FeatureSpec) -> str:
    lines = ["# stability classifier: layers, then input features", f"layers {params.n_layers}"]
    for k, (W, b, a) in enumerate(zip(params.weights, params.biases, params.activations), 1):
        lines.append(f"layer {k} rows={W.shape[0]} cols={W.shape[1]} activation={a}")
        lines.extend("W " + " ".join(_f(v) for v in row) for row in W)
        lines.append("b " + " ".join(_f(v) for v in b))
    lines.append(f"features variant={spec.variant} dim={spec.dim} fitted={int(spec.fitted)}")
    mean, scale = spec._arrays()
    for (kind, i), mu, sc in zip(spec.slots, mean, scale):
        lines.append(f"slot kind={kind} index={i} mean={_f(mu)} scale={_f(sc)}")
    return "\n".join(lines) + "\n"


def parse_weights(text: str) -> tuple[MlpParams, FeatureSpec]:
    Ws, bs, acts = [], [], []
    rows: list = []
    variant, slots, means, scales, fitted = None, [], [], [], False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kw, *rest = line.split()
        try:
            if kw == "layers":
                continue
            if kw == "layer":
                kv = dict(t.split("=", 1) for t in rest[1:])
                acts.append(kv["activation"])
                rows = []
                Ws.append((int(kv["rows"]), int(kv["cols"]), rows))
            elif kw == "W":
                rows.append([float(v) for v in rest])
            elif kw == "b":
                bs.append(np.array([float(v) for v in rest]))
            elif kw == "features":
                kv = dict(t.split("=", 1) for t in rest)
                variant = kv["variant"]
                fitted = kv.get("fitted", "1") == "1"
            elif kw == "slot":
                kv = dict(t.split("=", 1) for t in rest)
                slots.append((kv["kind"], int(kv["index"])))
                means.append(float(kv["mean"]))
                scales.append(float(kv["scale"]))
            else:
                raise ValueError(f"unknown record {kw!r}")
        except (KeyError, ValueError) as exc:
            raise ValueError(f"weights file line {lineno}: {exc}") from None
    mats = []
    for r, c, data in Ws:
        M = np.array(data, float).reshape(r, c) if data else np.zeros((r, c))
        mats.append(M)
    params = MlpParams(mats, bs, acts)
    spec = FeatureSpec(variant, tuple(slots), tuple(means) if fitted else None, tuple(scales) if fitted else None)
    if spec.dim != params.input_dim:
        raise ValueError(f"feature count {spec.dim} does not match network input {params.input_dim}")
    return params, spec


def load_weights(path) -> tuple[MlpParams, FeatureSpec]:
    with open(path) as fh:
        return parse_weights(fh.read())
