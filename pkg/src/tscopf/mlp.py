"""Small fully connected classifier with exact input derivatives.

Layer ``k`` computes ``y_k = W_k x_{k-1} + b_k`` and ``x_k = act_k(y_k)``; the
last layer has width one and a sigmoid activation.  All layer arithmetic
lives in :func:`layer_affine` and :data:`ACTIVATIONS` so that inference and
the optimization embedding evaluate exactly the same expressions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


def softplus(z):
    z = np.asarray(z, float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _tanh(z):
    t = np.tanh(z)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _softplus(z):
    s = expit(z)
    return softplus(z), s, s * (1.0 - s)


def _sigmoid(z):
    s = expit(z)
    d = s * (1.0 - s)
    return s, d, d * (1.0 - 2.0 * s)


def _linear(z):
    z = np.asarray(z, float)
    return z.copy(), np.ones_like(z), np.zeros_like(z)


# tag -> z -> (value, first derivative, second derivative)
ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus, "sigmoid": _sigmoid, "linear": _linear}


def layer_affine(W, b, x):
    return W @ x + b


@dataclass
class MlpParams:
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        self.weights = [np.asarray(W, float) for W in self.weights]
        self.biases = [np.asarray(b, float) for b in self.biases]
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValueError("need one weight matrix, bias and activation per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k + 1}: bias shape {b.shape} does not match weights {W.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k + 1}: input width {W.shape[1]} != previous width "
                                 f"{self.weights[k - 1].shape[0]}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.weights[-1].shape[0] != 1 or self.activations[-1] != "sigmoid":
            raise ValueError("output layer must have width 1 and a sigmoid activation")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def widths(self) -> tuple:
        return tuple(W.shape[0] for W in self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @classmethod
    def zeros(cls, input_dim, hidden=(128, 128), activations=("tanh", "softplus")):
        dims = (input_dim, *hidden, 1)
        Ws = [np.zeros((dims[k + 1], dims[k])) for k in range(len(dims) - 1)]
        bs = [np.zeros(d) for d in dims[1:]]
        return cls(Ws, bs, list(activations) + ["sigmoid"])

    @classmethod
    def initialize(cls, input_dim, hidden=(128, 128), activations=("tanh", "softplus"), seed=0):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = (input_dim, *hidden, 1)
        Ws, bs = [], []
        for k in range(len(dims) - 1):
            lim = math.sqrt(6.0 / (dims[k] + dims[k + 1]))
            Ws.append(rng.uniform(-lim, lim, (dims[k + 1], dims[k])))
            bs.append(np.zeros(dims[k + 1]))
        return cls(Ws, bs, list(activations) + ["sigmoid"])

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], list(self.activations))


def _check(params: MlpParams, x):
    x = np.asarray(x, float)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {params.input_dim}")
    return x


def forward_chain(params: MlpParams, x):
    """Pre-activations ``y_k`` and activations ``x_k`` for every layer."""
    x = _check(params, x)
    ys, xs = [], []
    h = x
    for W, b, a in zip(params.weights, params.biases, params.activations):
        y = layer_affine(W, b, h)
        h = ACTIVATIONS[a](y)[0]
        ys.append(y)
        xs.append(h)
    return ys, xs


def logit(params: MlpParams, x) -> float:
    """Output pre-activation (the value fed to the final sigmoid)."""
    return float(forward_chain(params, x)[0][-1][0])


def forward(params: MlpParams, x) -> float:
    return float(forward_chain(params, x)[1][-1][0])


def forward_batch(params: MlpParams, X) -> np.ndarray:
    H = _check(params, X)
    for W, b, a in zip(params.weights, params.biases, params.activations):
        H = ACTIVATIONS[a](H @ W.T + b)[0]
    return H[:, 0]


def logit_derivatives(params: MlpParams, x, hessian: bool = True):
    """Value, gradient and (optionally) Hessian of the output logit w.r.t. ``x``."""
    x = _check(params, x)
    ys, _ = forward_chain(params, x)
    # forward-mode Jacobians J_k = d y_k / d x
    jac = []
    J = params.weights[0]
    derivs = []
    for k, (W, a) in enumerate(zip(params.weights, params.activations)):
        if k:
            J = W @ (derivs[-1][0][:, None] * J)
        jac.append(J)
        _, d1, d2 = ACTIVATIONS[a](ys[k])
        derivs.append((d1, d2))
    # reverse sweep: adjoint of the output logit w.r.t. x_k (post-activation)
    grad = jac[-1][0]
    if not hessian:
        return float(ys[-1][0]), grad.copy(), None
    H = np.zeros((len(x), len(x)))
    adj = params.weights[-1][0]  # d y_out / d x_{K-1}
    for k in range(params.n_layers - 2, -1, -1):
        d1, d2 = derivs[k]
        H += (jac[k].T * (adj * d2)) @ jac[k]
        adj = (adj * d1) @ params.weights[k]
    return float(ys[-1][0]), grad.copy(), H


def input_gradient(params: MlpParams, x) -> np.ndarray:
    """Exact d forward / d x by reverse accumulation."""
    ys, xs = forward_chain(params, x)
    adj = np.ones(1)
    for k in range(params.n_layers - 1, -1, -1):
        adj = adj * ACTIVATIONS[params.activations[k]](ys[k])[1]
        adj = adj @ params.weights[k]
    return adj


# ---------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    batch_size: int = 64
    train_fraction: float = 0.8
    val_fraction: float = 0.2
    learning_rate: float = 1e-2
    momentum: float = 0.9
    max_epochs: int = 300
    patience: int = 30
    plateau: int = 8
    min_lr: float = 1e-5
    hidden: tuple = (128, 128)
    activations: tuple = ("tanh", "softplus")
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if abs(self.train_fraction + self.val_fraction - 1.0) > 1e-12:
            raise ValueError("train and validation fractions must sum to 1")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train fraction must be in (0, 1]")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: float = float("nan")
    epochs: int = 0


def _bce_terms(params, X, t, w):
    """Weighted mean cross-entropy and parameter gradients (from logits)."""
    ys, xs = [], []
    H = X
    for W, b, a in zip(params.weights, params.biases, params.activations[:-1] + ["linear"]):
        Y = H @ W.T + b
        ys.append(Y)
        H = ACTIVATIONS[a](Y)[0]
        xs.append(H)
    z = ys[-1][:, 0]
    # log(1 + e^z) - t z, stable
    loss_i = softplus(z) - t * z
    wsum = w.sum()
    loss = float(w @ loss_i / wsum)
    delta = ((expit(z) - t) * w / wsum)[:, None]
    gW, gb = [None] * params.n_layers, [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        prev = X if k == 0 else xs[k - 1]
        gW[k] = delta.T @ prev
        gb[k] = delta.sum(0)
        if k:
            delta = (delta @ params.weights[k]) * ACTIVATIONS[params.activations[k - 1]](ys[k - 1])[1]
    return loss, gW, gb


def _class_weights(t):
    n1 = t.sum()
    n0 = len(t) - n1
    return np.where(t > 0.5, 0.5 * len(t) / n1, 0.5 * len(t) / n0)


def split_indices(n: int, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_train = int(round(cfg.train_fraction * n))
    if cfg.val_fraction > 0:
        n_train = min(max(n_train, 1), n - 1)
    return perm[:n_train], perm[n_train:]


def train(X, y, cfg: TrainConfig | None = None, *, report: TrainReport | None = None) -> MlpParams:
    """Fit by minibatch SGD with momentum on class-weighted cross-entropy.

    Returns the parameters with the lowest validation loss.  The learning rate
    is halved when validation loss has not improved for ``plateau`` epochs;
    training stops after ``patience`` epochs without improvement.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, float)
    t = np.asarray(y, float)
    if X.ndim != 2 or len(X) != len(t):
        raise ValueError("X must be (samples, features) with one label per row")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("labels must be 0 or 1")
    tr, va = split_indices(len(t), cfg)
    if len(np.unique(t[tr])) < 2:
        raise ValueError("training split contains a single class; cannot train a classifier")
    if len(va) == 0:
        va = tr
    Xt, tt = X[tr], t[tr]
    Xv, tv = X[va], t[va]
    wt = _class_weights(tt)
    wv = _class_weights(tv) if len(np.unique(tv)) == 2 else np.ones(len(tv))

    params = MlpParams.initialize(X.shape[1], cfg.hidden, cfg.activations, seed=cfg.seed)
    vel_W = [np.zeros_like(W) for W in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    rng = np.random.default_rng(cfg.seed + 1)
    lr = cfg.learning_rate
    rep = report if report is not None else TrainReport()
    rep.train_loss.append(_bce_terms(params, Xt, tt, wt)[0])
    best = _bce_terms(params, Xv, tv, wv)[0]
    rep.val_loss.append(best)
    best_params = params.copy()
    since_best = since_cut = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(tt))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, gW, gb = _bce_terms(params, Xt[idx], tt[idx], wt[idx])
            for k in range(params.n_layers):
                vel_W[k] = cfg.momentum * vel_W[k] - lr * gW[k]
                vel_b[k] = cfg.momentum * vel_b[k] - lr * gb[k]
                params.weights[k] += vel_W[k]
                params.biases[k] += vel_b[k]
        rep.train_loss.append(_bce_terms(params, Xt, tt, wt)[0])
        vloss = _bce_terms(params, Xv, tv, wv)[0]
        rep.val_loss.append(vloss)
        rep.epochs = epoch + 1
        if not np.isfinite(vloss):
            break
        if vloss < best - 1e-7:
            best, best_params = vloss, params.copy()
            since_best = since_cut = 0
        else:
            since_best += 1
            since_cut += 1
            if since_cut >= cfg.plateau:
                lr = max(lr / 2.0, cfg.min_lr)
                since_cut = 0
            if since_best >= cfg.patience:
                break
    rep.val_accuracy = float(np.mean((forward_batch(best_params, Xv) >= 0.5) == (tv > 0.5)))
    return best_params


def training_loss(params: MlpParams, X, y) -> float:
    t = np.asarray(y, float)
    return _bce_terms(params, np.asarray(X, float), t, _class_weights(t))[0]
