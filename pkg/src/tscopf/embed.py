"""Embedding the stability classifier into the dispatch optimization.

Two equivalent encodings are provided:

* reduced space: the output logit is a composite function of the dispatch
  variables with exact gradient and Hessian (the default in the pipeline,
  since it keeps the KKT system at network size);
* full space (:func:`emit_constraints`): every layer's pre-activation and
  activation becomes an auxiliary variable tied by equality rows.

Both bound the logit from below, ``logit(c) - y_out <= 0``, which is the
same set as ``sigmoid(y_out) >= c``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .acopf import Block, OpfModel
from .mlp import ACTIVATIONS, MlpParams, forward_chain, layer_affine, logit_derivatives
from .surrogate import FeatureMap, FeatureSpec

SMOOTH = {"tanh", "softplus", "sigmoid", "linear"}


def threshold_logit(c: float) -> float:
    if not 0.0 <= c < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {c}")
    if c == 0.0:
        return -math.inf
    return math.log(c) - math.log1p(-c)


def _check_dims(params: MlpParams, spec: FeatureSpec):
    if params.input_dim != spec.dim:
        raise ValueError(f"network expects {params.input_dim} inputs but input set {spec.variant} "
                         f"has {spec.dim}")


class NetworkLogit:
    """Output logit of the classifier as a function of model variables."""

    def __init__(self, model: OpfModel, params: MlpParams, spec: FeatureSpec):
        _check_dims(params, spec)
        self.params = params
        self.fmap = FeatureMap(model, spec)
        self._key = None
        self._val = None

    def _eval(self, z):
        key = z.tobytes()
        if key != self._key:
            x0 = self.fmap.value(z)
            y, gx, Hx = logit_derivatives(self.params, x0)
            J = self.fmap.jacobian(z)
            self._val = (y, gx, Hx, J, J.T @ gx)
            self._key = key
        return self._val

    def value_grad(self, z):
        y, _, _, _, g = self._eval(z)
        return y, g

    def hessian(self, z):
        _, gx, Hx, J, _ = self._eval(z)
        H = J.T @ Hx @ J
        Hf = self.fmap.hessian(z, gx)
        if Hf is not None:
            H += Hf
        return H


class StabilityBlock(Block):
    """One inequality row: logit(c) - y_out(z) <= 0."""

    n_rows = 1

    def __init__(self, expr, c: float):
        self.expr = expr
        self.c = c
        lc = threshold_logit(c)
        # c = 0 imposes nothing; keep the row but far from binding
        self.lc = lc if np.isfinite(lc) else -1e3

    def values(self, z):
        y, g = self.expr.value_grad(z)
        return np.array([self.lc - y]), -g[None, :]

    def hessian(self, z, w):
        return -w[0] * self.expr.hessian(z)


class UncertaintyObjective:
    """(sigmoid(y_out) - 1/2)^2, largest where the classifier is surest."""

    def __init__(self, expr):
        self.expr = expr

    def value_grad(self, z):
        y, g = self.expr.value_grad(z)
        s = expit(y)
        ds = s * (1 - s)
        return float((s - 0.5) ** 2), 2 * (s - 0.5) * ds * g

    def hessian(self, z):
        y, g = self.expr.value_grad(z)
        s = expit(y)
        ds = s * (1 - s)
        d2s = ds * (1 - 2 * s)
        a = 2 * (ds * ds + (s - 0.5) * d2s)
        return a * np.outer(g, g) + 2 * (s - 0.5) * ds * self.expr.hessian(z)


class LogitSquareObjective:
    """y_out^2: same zero set as the uncertainty objective but never flat.

    Used to steer a start onto the level set before polishing, since
    (sigmoid(y) - 1/2)^2 has vanishing slope wherever the classifier saturates.
    """

    def __init__(self, expr):
        self.expr = expr

    def value_grad(self, z):
        y, g = self.expr.value_grad(z)
        return float(y * y), 2 * y * g

    def hessian(self, z):
        y, g = self.expr.value_grad(z)
        return 2 * np.outer(g, g) + 2 * y * self.expr.hessian(z)


# ---------------------------------------------------------------------
# full-space encoding

class NNConstraintBlock:
    """Layer equations over variables ``v = [x0, aux]``.

    ``aux`` stacks ``y_k, x_k`` for each hidden layer and then the output
    logit.  Equality rows appear in the same order as ``aux``.
    """

    def __init__(self, params: MlpParams, c: float):
        bad = [a for a in params.activations if a not in SMOOTH]
        if bad:
            raise ValueError(f"unsupported activation(s) {bad}")
        self.params = params
        self.c = c
        self.lc = threshold_logit(c)
        self.n_in = params.input_dim
        widths = params.widths
        self.n_aux = 2 * sum(widths[:-1]) + widths[-1]
        self.n_eq = self.n_aux
        self.n_ineq = 1
        self.n_var = self.n_in + self.n_aux
        # offsets of y_k and x_k inside v
        self.y_sl, self.x_sl = [], []
        k = self.n_in
        for i, w in enumerate(widths):
            self.y_sl.append(slice(k, k + w)); k += w
            if i < len(widths) - 1:
                self.x_sl.append(slice(k, k + w)); k += w
        self.out = self.y_sl[-1].start

    def consistent_point(self, x0) -> np.ndarray:
        ys, xs = forward_chain(self.params, x0)
        v = np.zeros(self.n_var)
        v[: self.n_in] = x0
        for k, (y, x) in enumerate(zip(ys, xs)):
            v[self.y_sl[k]] = y
            if k < len(self.x_sl):
                v[self.x_sl[k]] = x
        return v

    def _input(self, v, k):
        return v[: self.n_in] if k == 0 else v[self.x_sl[k - 1]]

    def _input_cols(self, k):
        return np.arange(self.n_in) if k == 0 else np.arange(self.x_sl[k - 1].start, self.x_sl[k - 1].stop)

    def eq(self, v):
        P = self.params
        c = np.zeros(self.n_eq)
        J = np.zeros((self.n_eq, self.n_var))
        for k, (W, b, a) in enumerate(zip(P.weights, P.biases, P.activations)):
            ys = self.y_sl[k]
            rows = np.arange(ys.start, ys.stop) - self.n_in
            c[rows] = v[ys] - layer_affine(W, b, self._input(v, k))
            J[rows, np.arange(ys.start, ys.stop)] = 1.0
            J[np.ix_(rows, self._input_cols(k))] = -W
            if k < len(self.x_sl):
                xs = self.x_sl[k]
                xrows = np.arange(xs.start, xs.stop) - self.n_in
                val, d1, _ = ACTIVATIONS[a](v[ys])
                c[xrows] = v[xs] - val
                J[xrows, np.arange(xs.start, xs.stop)] = 1.0
                J[xrows, np.arange(ys.start, ys.stop)] = -d1
        return c, J

    def ineq(self, v):
        J = np.zeros((1, self.n_var))
        J[0, self.out] = -1.0
        lc = self.lc if np.isfinite(self.lc) else -1e3
        return np.array([lc - v[self.out]]), J

    def eq_hessian(self, v, w):
        H = np.zeros((self.n_var, self.n_var))
        P = self.params
        for k in range(len(self.x_sl)):
            ys, xs = self.y_sl[k], self.x_sl[k]
            _, _, d2 = ACTIVATIONS[P.activations[k]](v[ys])
            idx = np.arange(ys.start, ys.stop)
            H[idx, idx] = -w[np.arange(xs.start, xs.stop) - self.n_in] * d2
        return H

    def output(self, v) -> float:
        return float(v[self.out])


def emit_constraints(params: MlpParams, spec: FeatureSpec, c: float) -> NNConstraintBlock:
    _check_dims(params, spec)
    return NNConstraintBlock(params, c)


class _FullSpaceEq(Block):
    def __init__(self, model, block, fmap, aux):
        self.m, self.b, self.fmap, self.aux = model, block, fmap, aux
        self.n_rows = block.n_eq

    def _v(self, z):
        return np.r_[self.fmap.value(z), z[self.aux]]

    def values(self, z):
        c, Jv = self.b.eq(self._v(z))
        J = Jv[:, : self.b.n_in] @ self.fmap.jacobian(z)
        J[:, self.aux] += Jv[:, self.b.n_in:]
        return c, J

    def hessian(self, z, w):
        v = self._v(z)
        Hv = self.b.eq_hessian(v, w)
        H = np.zeros((self.m.n_var, self.m.n_var))
        a = np.arange(self.aux.start, self.aux.stop)
        H[np.ix_(a, a)] = Hv[self.b.n_in:, self.b.n_in:]
        # first-layer rows are -W1 x0(z): curvature enters through the features
        _, Jv = self.b.eq(v)
        wx = Jv[:, : self.b.n_in].T @ w
        Hf = self.fmap.hessian(z, wx)
        if Hf is not None:
            H += Hf
        return H


class _FullSpaceIneq(Block):
    n_rows = 1

    def __init__(self, model, block, aux):
        self.m, self.b, self.aux = model, block, aux

    def values(self, z):
        J = np.zeros((1, self.m.n_var))
        J[0, self.aux.start + self.b.out - self.b.n_in] = -1.0
        lc = self.b.lc if np.isfinite(self.b.lc) else -1e3
        return np.array([lc - z[self.aux.start + self.b.out - self.b.n_in]]), J

    def hessian(self, z, w):
        return None


class FullSpaceLogit:
    """Logit read off the auxiliary output variable (linear in the model point)."""

    def __init__(self, model, block, aux):
        self.m, self.idx = model, aux.start + block.out - block.n_in

    def value_grad(self, z):
        g = np.zeros(self.m.n_var)
        g[self.idx] = 1.0
        return float(z[self.idx]), g

    def hessian(self, z):
        return np.zeros((self.m.n_var, self.m.n_var))


def attach_full_space(model: OpfModel, params: MlpParams, spec: FeatureSpec, c: float | None):
    """Add auxiliary layer variables and rows to ``model``.

    With ``c`` given the threshold row is added as well.  Returns the
    constraint block, the auxiliary slice and a logit expression.
    """
    block = emit_constraints(params, spec, 0.0 if c is None else c)
    fmap = FeatureMap(model, spec)
    aux = model.add_variables(block.n_aux)
    model.eq_blocks.append(_FullSpaceEq(model, block, fmap, aux))
    if c is not None:
        model.ineq_blocks.append(_FullSpaceIneq(model, block, aux))
    return block, aux, FullSpaceLogit(model, block, aux), fmap


def full_space_start(model: OpfModel, block: NNConstraintBlock, aux: slice, fmap: FeatureMap, z):
    """Complete a dispatch point with layer values consistent with its features."""
    z = np.array(z, float)
    z[aux] = block.consistent_point(fmap.value(z))[block.n_in:]
    return z
