"""Merged-weights mixture model with analytic gradients.

A :class:`MixedModel` holds shared base layers and ``C`` adaptor sets. A
client's router mixes the adaptor sets into one effective set of weights
(``W + sum_c pi_c dW_c``) and runs a single forward pass. Two families are
supported: ``linear`` (``Y = X W^T + b``) and ``mlp2``
(``Y = relu(X W1^T + b1) W2^T + b2``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adaptors import BiasAdaptor, LinearLoRA, precondition_lora_grads
from .errors import DomainError, ShapeError
from .numerics import relu

FAMILIES = ("linear", "mlp2")
ROUTER_MODES = ("softmax_sgd", "exp_weights")
SIMPLEX_TOL = 1e-12


def softmax(theta):
    z = np.asarray(theta, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def check_simplex(pi, n=None, tol=1e-9):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or (n is not None and pi.shape[0] != n):
        raise DomainError(f"mixture must be a vector of length {n}, got shape {pi.shape}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > tol or not np.all(np.isfinite(pi)):
        raise DomainError(f"mixture {pi} is not on the simplex")
    return pi


@dataclass
class Router:
    """Per-client mixture ``pi = softmax(theta)``; ``fixed`` pins an explicit ``pi``."""

    theta: np.ndarray
    mode: str = "softmax_sgd"
    fixed: np.ndarray | None = None

    @classmethod
    def uniform(cls, C, mode="softmax_sgd"):
        if mode not in ROUTER_MODES:
            raise DomainError(f"unknown router mode {mode!r}")
        return cls(np.zeros(C), mode)

    @classmethod
    def frozen(cls, pi):
        pi = check_simplex(pi)
        return cls(np.zeros(pi.shape[0]), "fixed", pi.copy())

    @property
    def pi(self):
        return self.fixed if self.fixed is not None else softmax(self.theta)

    @property
    def learnable(self):
        return self.fixed is None

    def copy(self):
        return Router(self.theta.copy(), self.mode, None if self.fixed is None else self.fixed.copy())


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray | None = None

    @property
    def shape(self):
        return self.weight.shape

    def arrays(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def copy(self):
        return Dense(self.weight.copy(), None if self.bias is None else self.bias.copy())


@dataclass
class LayerAdaptor:
    """Adaptor for one dense layer: a LoRA or a full dense delta, plus an optional bias delta."""

    lora: LinearLoRA | None = None
    dense: np.ndarray | None = None
    bias: BiasAdaptor | None = None

    def delta_weight(self):
        if self.lora is not None:
            return self.lora.materialize()
        return self.dense

    def delta_bias(self):
        return None if self.bias is None else self.bias.delta

    def arrays(self):
        out = []
        if self.lora is not None:
            out += [self.lora.U, self.lora.V]
        if self.dense is not None:
            out.append(self.dense)
        if self.bias is not None:
            out.append(self.bias.delta)
        return out

    def set_arrays(self, arrays):
        it = iter(arrays)
        if self.lora is not None:
            self.lora.U, self.lora.V = next(it), next(it)
        if self.dense is not None:
            self.dense = next(it)
        if self.bias is not None:
            self.bias.delta = next(it)

    def copy(self):
        return LayerAdaptor(
            None if self.lora is None else self.lora.copy(),
            None if self.dense is None else self.dense.copy(),
            None if self.bias is None else BiasAdaptor(self.bias.delta.copy()))


@dataclass
class AdaptorSet:
    """One cluster's adaptors, one entry per base layer (``None`` = not adapted)."""

    layers: list

    def arrays(self):
        return [a for la in self.layers if la is not None for a in la.arrays()]

    def set_arrays(self, arrays):
        arrays = list(arrays)
        i = 0
        for la in self.layers:
            if la is None:
                continue
            n = len(la.arrays())
            la.set_arrays(arrays[i:i + n])
            i += n

    @property
    def num_params(self):
        return sum(a.size for a in self.arrays())

    def copy(self):
        return AdaptorSet([None if la is None else la.copy() for la in self.layers])


@dataclass
class GradientBundle:
    base: list
    adaptors: list
    router: np.ndarray

    def all_arrays(self):
        return list(self.base) + [a for s in self.adaptors for a in s] + [self.router]


@dataclass
class MixedModel:
    family: str
    base: list
    adaptors: list = field(default_factory=list)
    base_trainable: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown family {self.family!r}")
        if len(self.base) != (1 if self.family == "linear" else 2):
            raise ShapeError(f"{self.family} model needs {1 if self.family == 'linear' else 2} layers")
        if not self.adaptors:
            self.adaptors = [AdaptorSet([None] * len(self.base))]
        for s in self.adaptors:
            if len(s.layers) != len(self.base):
                raise ShapeError("adaptor set does not match the number of base layers")
            for la, layer in zip(s.layers, self.base):
                if la is None:
                    continue
                dw = la.delta_weight()
                if dw is not None and dw.shape != layer.shape:
                    raise ShapeError(f"adaptor weight {dw.shape} does not conform to {layer.shape}")
                if la.bias is not None and (layer.bias is None or la.bias.delta.shape != layer.bias.shape):
                    raise ShapeError("bias adaptor needs a matching base bias")
        if self.base[0].weight.shape[0] != self.base[-1].weight.shape[1] and self.family == "mlp2":
            raise ShapeError("hidden dimensions of the two layers disagree")

    @property
    def C(self):
        return len(self.adaptors)

    @property
    def d_in(self):
        return self.base[0].weight.shape[1]

    @property
    def d_out(self):
        return self.base[-1].weight.shape[0]

    def base_arrays(self):
        return [a for layer in self.base for a in layer.arrays()]

    def set_base_arrays(self, arrays):
        it = iter(arrays)
        for layer in self.base:
            layer.weight = next(it)
            if layer.bias is not None:
                layer.bias = next(it)

    def copy(self):
        return MixedModel(self.family, [b.copy() for b in self.base],
                          [s.copy() for s in self.adaptors], self.base_trainable)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def init_base(family, dims, rng, bias=False, zero=False):
    """Dense layers with ``N(0, 1/sqrt(fan_in))`` weights; ``dims = (d_in, [d_h,] d_out)``."""
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = np.zeros((d_out, d_in)) if zero else rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in))
        layers.append(Dense(w, np.zeros(d_out) if bias else None))
    return layers


def lora_adaptor_set(base, ranks, rng, bias=True, adapt=None):
    """Fresh LoRA adaptor set; ``ranks[i]`` per layer, ``adapt`` masks adapted layers."""
    layers = []
    for i, layer in enumerate(base):
        if adapt is not None and not adapt[i]:
            layers.append(None)
            continue
        m, n = layer.shape
        layers.append(LayerAdaptor(
            lora=LinearLoRA.init(m, n, ranks[i], rng),
            bias=BiasAdaptor.zeros(m) if (bias and layer.bias is not None) else None))
    return AdaptorSet(layers)


def dense_adaptor_set(base, rng):
    """Full-size copy of the base layers drawn at the base init scale (Ensemble members)."""
    layers = []
    for layer in base:
        m, n = layer.shape
        layers.append(LayerAdaptor(
            dense=rng.normal(0.0, 1.0 / math.sqrt(n), (m, n)),
            bias=BiasAdaptor.zeros(m) if layer.bias is not None else None))
    return AdaptorSet(layers)


# ---------------------------------------------------------------------------
# merging and forward
# ---------------------------------------------------------------------------

def merge_weights(model, pi):
    """Effective dense layers ``W + sum_c pi_c dW_c`` and ``b + sum_c pi_c db_c``."""
    pi = check_simplex(pi, model.C)
    merged = []
    for i, layer in enumerate(model.base):
        w = layer.weight
        b = layer.bias
        for c, s in enumerate(model.adaptors):
            la = s.layers[i]
            if la is None:
                continue
            dw = la.delta_weight()
            if dw is not None:
                w = w + pi[c] * dw
            db = la.delta_bias()
            if db is not None:
                b = b + pi[c] * db
        merged.append(Dense(w, b))
    return merged


def _check_xy(model, X, Y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise ShapeError(f"inputs must have shape (n, {model.d_in}), got {X.shape}")
    if Y is None:
        return X, None
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != (X.shape[0], model.d_out):
        raise ShapeError(f"targets must have shape ({X.shape[0]}, {model.d_out}), got {Y.shape}")
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    return X, Y


def _affine(X, layer):
    z = X @ layer.weight.T
    return z if layer.bias is None else z + layer.bias


def forward_merged(family, merged, X):
    if family == "linear":
        return _affine(X, merged[0])
    return _affine(relu(_affine(X, merged[0])), merged[1])


def forward(model, pi, X):
    X, _ = _check_xy(model, X)
    return forward_merged(model.family, merge_weights(model, pi), X)


def mse(pred, Y):
    return float(np.mean((pred - Y) ** 2))


def fml_loss(model, pi, X, Y):
    X, Y = _check_xy(model, X, Y)
    return mse(forward_merged(model.family, merge_weights(model, pi), X), Y)


def cluster_losses(model, X, Y):
    """Loss of each cluster's own weights ``w_c = (u, a_c)``, one forward pass per cluster."""
    X, Y = _check_xy(model, X, Y)
    out = np.empty(model.C)
    for c in range(model.C):
        onehot = np.zeros(model.C)
        onehot[c] = 1.0
        out[c] = mse(forward_merged(model.family, merge_weights(model, onehot), X), Y)
    return out


def mfl_objective(model, pi, X, Y):
    """Mixture of per-cluster losses ``sum_c pi_c f(w_c)``."""
    pi = check_simplex(pi, model.C)
    return float(pi @ cluster_losses(model, X, Y))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def router_grad(pi, cluster_weights, merged_grad):
    """Gradient w.r.t. router logits: ``pi_c * <grad f(w_hat), w_c - w_hat>``.

    ``cluster_weights`` is ``(C, d)`` (one flattened parameter vector per
    cluster), ``merged_grad`` the gradient at ``w_hat = pi @ cluster_weights``.
    """
    pi = np.asarray(pi, dtype=np.float64)
    W = np.asarray(cluster_weights, dtype=np.float64).reshape(len(pi), -1)
    g = np.asarray(merged_grad, dtype=np.float64).ravel()
    w_hat = pi @ W
    return pi * ((W - w_hat) @ g)


def router_step_exp_weights(pi_prev, losses, eta):
    """``pi_new ∝ pi_prev * exp(-eta * losses)``, evaluated with a max-shift."""
    if not eta > 0:
        raise DomainError("eta must be positive")
    pi_prev = check_simplex(pi_prev)
    losses = np.asarray(losses, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(pi_prev) - eta * losses
    return softmax(logits)


def _merged_layer_grads(model, merged, X, Y):
    n = X.shape[0]
    if model.family == "linear":
        pred = _affine(X, merged[0])
        d_pred = 2.0 * (pred - Y) / pred.size
        grads = [(d_pred.T @ X, d_pred.sum(axis=0))]
    else:
        z = _affine(X, merged[0])
        h = relu(z)
        pred = _affine(h, merged[1])
        d_pred = 2.0 * (pred - Y) / pred.size
        d_z = (d_pred @ merged[1].weight) * (z > 0)
        grads = [(d_z.T @ X, d_z.sum(axis=0)), (d_pred.T @ h, d_pred.sum(axis=0))]
    assert n > 0
    return mse(pred, Y), grads


def loss_and_grad(model, pi, X, Y, precondition=None):
    """FML loss at the mixture ``pi`` and analytic gradients.

    Router gradient is with respect to softmax logits. ``precondition`` is an
    ``eps`` for the inverse-Gram LoRA preconditioner, or ``None`` to disable.
    """
    X, Y = _check_xy(model, X, Y)
    pi = check_simplex(pi, model.C)
    merged = merge_weights(model, pi)
    loss, layer_grads = _merged_layer_grads(model, merged, X, Y)

    base_grads = []
    for layer, (g_w, g_b) in zip(model.base, layer_grads):
        base_grads.append(g_w)
        if layer.bias is not None:
            base_grads.append(g_b)
    if not model.base_trainable:
        base_grads = [np.zeros_like(g) for g in base_grads]

    adaptor_grads = []
    router_g = np.zeros(model.C)
    for c, s in enumerate(model.adaptors):
        grads = []
        for i, la in enumerate(s.layers):
            if la is None:
                continue
            g_w, g_b = layer_grads[i]
            if la.lora is not None:
                U, V = la.lora.U, la.lora.V
                gu, gv = pi[c] * (g_w @ V), pi[c] * (g_w.T @ U)
                if precondition is not None:
                    gu, gv = precondition_lora_grads(U, V, gu, gv, precondition)
                grads += [gu, gv]
            if la.dense is not None:
                grads.append(pi[c] * g_w)
            if la.bias is not None:
                grads.append(pi[c] * g_b)
        adaptor_grads.append(grads)

    if model.C > 1:
        # inner products with the adapted parts only; the shared base cancels in w_c - w_hat
        deltas, flat_g = [], []
        for i, layer in enumerate(model.base):
            g_w, g_b = layer_grads[i]
            per_c_w = [s.layers[i].delta_weight() if s.layers[i] is not None else None
                       for s in model.adaptors]
            if any(d is not None for d in per_c_w):
                deltas.append([np.zeros(layer.shape) if d is None else d for d in per_c_w])
                flat_g.append(g_w)
            per_c_b = [s.layers[i].delta_bias() if s.layers[i] is not None else None
                       for s in model.adaptors]
            if any(d is not None for d in per_c_b):
                deltas.append([np.zeros(layer.bias.shape) if d is None else d for d in per_c_b])
                flat_g.append(g_b)
        if deltas:
            W = np.stack([np.concatenate([d[c].ravel() for d in deltas]) for c in range(model.C)])
            G = np.concatenate([g.ravel() for g in flat_g])
            router_g = router_grad(pi, W, G)
    return loss, GradientBundle(base_grads, adaptor_grads, router_g)


def apply_step(model, router, grads, eta, router_eta=None):
    """In-place simultaneous gradient step on weights and (softmax) router logits."""
    if model.base_trainable:
        model.set_base_arrays([a - eta * g for a, g in zip(model.base_arrays(), grads.base)])
    for s, gs in zip(model.adaptors, grads.adaptors):
        if gs:
            s.set_arrays([a - eta * g for a, g in zip(s.arrays(), gs)])
    if router is not None and router.learnable and router.mode == "softmax_sgd":
        router.theta = router.theta - (eta if router_eta is None else router_eta) * grads.router
