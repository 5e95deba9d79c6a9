"""Adaptor parameterizations: linear LoRA, ConvLoRA variants, bias and norm
adaptors, rank budgeting, LoRA gradient preconditioning and centering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError, ShapeError
from .numerics import as_matrix, truncated_svd

CONV_VARIANTS = ("channel", "filter", "channel_filter", "reshaped_linear")


@dataclass(frozen=True)
class BudgetSpec:
    """Relative parameter budget per adaptor, e.g. ``rho=0.01`` for +1%."""

    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise DomainError(f"rho must lie in (0, 1], got {self.rho}")


def _rho(spec):
    return spec.rho if isinstance(spec, BudgetSpec) else BudgetSpec(float(spec)).rho


# ---------------------------------------------------------------------------
# Linear LoRA
# ---------------------------------------------------------------------------

@dataclass
class LinearLoRA:
    """Additive low-rank update ``L = U @ V.T`` for an ``m x n`` weight."""

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ShapeError(f"incompatible LoRA factors {self.U.shape}, {self.V.shape}")
        if self.U.shape[1] < 1:
            raise ShapeError("LoRA rank must be at least 1")

    @classmethod
    def init(cls, m, n, r, rng):
        """Random ``U`` with the base layer's init scale, zero ``V``."""
        return cls(rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, r)), np.zeros((n, r)))

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def shape(self):
        return self.U.shape[0], self.V.shape[0]

    @property
    def num_params(self):
        return self.U.size + self.V.size

    def materialize(self):
        return self.U @ self.V.T

    def copy(self):
        return LinearLoRA(self.U.copy(), self.V.copy())


@dataclass
class BiasAdaptor:
    delta: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))

    @property
    def num_params(self):
        return self.delta.size


@dataclass
class NormAdaptor:
    """Additive deltas on a normalization layer's scale and shift."""

    gamma_delta: np.ndarray
    beta_delta: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    @property
    def num_params(self):
        return self.gamma_delta.size + self.beta_delta.size

    def apply(self, h_hat, gamma, beta):
        """``(gamma + dgamma) * h_hat + (beta + dbeta)`` for an already-normalized ``h_hat``."""
        return h_hat * (gamma + self.gamma_delta) + (beta + self.beta_delta)


def linear_rank_for_budget(m, n, spec):
    """Largest rank with ``(m + n) r <= rho m n``, clamped to at least 1."""
    if m < 1 or n < 1:
        raise DomainError("layer dims must be positive")
    return max(1, math.floor(_rho(spec) * m * n / (m + n)))


# ---------------------------------------------------------------------------
# ConvLoRA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvRank:
    r_c: int
    r_f: int = 1
    # "out_k2": second stage carries the (1, k2) filter and the first stage (k1, 1);
    # "out_k1": the reverse. None for variants without a split choice.
    kernel_split: str | None = None

    @property
    def rank(self):
        return self.r_c * self.r_f


def conv_param_count(variant, c_in, c_out, k1, k2, rank, kernel_split=None):
    """Closed-form number of stored adaptor entries."""
    if variant in ("channel", "reshaped_linear"):
        return (c_out * k1 * k2 + c_in) * rank
    if variant == "filter":
        return (c_out * k2 + c_in * k1) * c_out * rank
    if variant == "channel_filter":
        if kernel_split == "out_k1":
            return (c_out * k1 + c_in * k2) * rank
        return (c_out * k2 + c_in * k1) * rank
    raise DomainError(f"unknown ConvLoRA variant {variant!r}")


def _choose_kernel_split(c_in, c_out, k1, k2):
    cost_k2 = c_out * k2 + c_in * k1
    cost_k1 = c_out * k1 + c_in * k2
    if cost_k2 != cost_k1:
        return "out_k2" if cost_k2 < cost_k1 else "out_k1"
    # tie: larger kernel dim goes to the factor touching the smaller channel count
    big_is_k1 = k1 >= k2
    out_is_small = c_out <= c_in
    return "out_k1" if big_is_k1 == out_is_small else "out_k2"


def conv_rank_for_budget(c_in, c_out, k1, k2, spec, variant="channel_filter", r_f=1):
    """Maximal rank under the budget ``params <= rho * c_in c_out k1 k2``."""
    if min(c_in, c_out, k1, k2) < 1:
        raise DomainError("conv dims must be positive")
    rho = _rho(spec)
    budget = rho * c_in * c_out * k1 * k2
    if variant == "channel_filter":
        split = _choose_kernel_split(c_in, c_out, k1, k2)
        per_rank = conv_param_count(variant, c_in, c_out, k1, k2, 1, split) * r_f
        return ConvRank(max(1, math.floor(budget / per_rank)), r_f, split)
    per_rank = conv_param_count(variant, c_in, c_out, k1, k2, 1)
    return ConvRank(max(1, math.floor(budget / per_rank)))


def compose_kernels(second, first):
    """Kernel ``L`` with ``conv(L, x) == conv(second, conv(first, x))``.

    ``L[i, j, s, t] = sum_{m, a'+a=s, b'+b=t} second[i, m, a', b'] * first[m, j, a, b]``
    """
    second = np.asarray(second, dtype=np.float64)
    first = np.asarray(first, dtype=np.float64)
    if second.ndim != 4 or first.ndim != 4 or second.shape[1] != first.shape[0]:
        raise ShapeError(f"cannot compose kernels {second.shape} after {first.shape}")
    c_out, mid, s1, s2 = second.shape
    _, c_in, f1, f2 = first.shape
    out = np.zeros((c_out, c_in, s1 + f1 - 1, s2 + f2 - 1))
    for a in range(s1):
        for b in range(s2):
            out[:, :, a:a + f1, b:b + f2] += np.einsum(
                "im,mjxy->ijxy", second[:, :, a, b], first)
    return out


@dataclass
class ConvLoRA:
    """Two-stage low-rank adaptor for a ``(c_out, c_in, k1, k2)`` kernel.

    ``first`` is applied to the input, ``second`` to its output. For the
    ``reshaped_linear`` variant the factors are the matricized linear LoRA
    ``U: (c_out k1 k2, r)`` and ``V: (r, c_in)``.
    """

    variant: str
    U: np.ndarray
    V: np.ndarray
    kernel_shape: tuple
    r_c: int
    r_f: int = 1
    kernel_split: str | None = None

    @classmethod
    def init(cls, kernel_shape, rank, variant="channel_filter", rng=None, *,
             r_f=1, kernel_split=None):
        """Zero-initialized ``V`` (so the merged kernel starts at zero)."""
        if variant not in CONV_VARIANTS:
            raise DomainError(f"unknown ConvLoRA variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        c_out, c_in, k1, k2 = kernel_shape
        std = 1.0 / math.sqrt(c_in * k1 * k2)
        if variant == "channel":
            u_shape, v_shape = (c_out, rank, k1, k2), (rank, c_in, 1, 1)
        elif variant == "filter":
            u_shape, v_shape = (c_out, rank * c_out, 1, k2), (rank * c_out, c_in, k1, 1)
        elif variant == "channel_filter":
            kernel_split = kernel_split or _choose_kernel_split(c_in, c_out, k1, k2)
            mid = rank * r_f
            if kernel_split == "out_k2":
                u_shape, v_shape = (c_out, mid, 1, k2), (mid, c_in, k1, 1)
            else:
                u_shape, v_shape = (c_out, mid, k1, 1), (mid, c_in, 1, k2)
        else:
            u_shape, v_shape = (c_out * k1 * k2, rank), (rank, c_in)
        return cls(variant, rng.normal(0.0, std, size=u_shape), np.zeros(v_shape),
                   tuple(kernel_shape), rank, r_f if variant == "channel_filter" else 1,
                   kernel_split if variant == "channel_filter" else None)

    @property
    def num_params(self):
        return self.U.size + self.V.size

    def stages(self):
        """``(first, second)`` kernels of the sequential two-convolution form."""
        if self.variant == "reshaped_linear":
            c_out, c_in, k1, k2 = self.kernel_shape
            r = self.U.shape[1]
            # row k1*k2*i + k2*a + b of U maps to second[i, :, a, b]
            second = self.U.reshape(c_out, k1, k2, r).transpose(0, 3, 1, 2)
            first = self.V.reshape(r, c_in, 1, 1)
            return first, second
        return self.V, self.U

    def merge(self):
        return merge_conv_lora(self)


def merge_conv_lora(adaptor):
    """Single kernel equivalent to running both stages of ``adaptor`` in sequence."""
    first, second = adaptor.stages()
    kernel = compose_kernels(second, first)
    if kernel.shape != tuple(adaptor.kernel_shape):
        raise ShapeError(
            f"{adaptor.variant} factors merge to {kernel.shape}, expected {adaptor.kernel_shape}")
    return kernel


# ---------------------------------------------------------------------------
# Preconditioning
# ---------------------------------------------------------------------------

def precondition_lora_grads(U, V, G_U, G_V, eps=1e-8):
    """Scale factor gradients by the inverse regularized Gram of the other factor.

    ``G_U <- G_U (V^T V + eps I)^-1`` and ``G_V <- G_V (U^T U + eps I)^-1``.
    """
    if not eps > 0:
        raise NumericalError("preconditioner eps must be positive")
    U, V = as_matrix(U, "U"), as_matrix(V, "V")
    G_U, G_V = as_matrix(G_U, "G_U"), as_matrix(G_V, "G_V")
    if G_U.shape != U.shape or G_V.shape != V.shape or U.shape[1] != V.shape[1]:
        raise ShapeError("gradient shapes must match factor shapes")
    eye = np.eye(U.shape[1])
    # X (A)^-1 == solve(A^T, X^T)^T, and both Gram matrices are symmetric
    new_gu = np.linalg.solve(V.T @ V + eps * eye, G_U.T).T
    new_gv = np.linalg.solve(U.T @ U + eps * eye, G_V.T).T
    return new_gu, new_gv


def precondition_conv_grads(adaptor, G_U, G_V, eps=1e-8):
    """Frobenius-norm variant for ConvLoRA factors (no kernel deconvolution)."""
    first, second = adaptor.stages()
    # rank axis is 1 in ``second`` and 0 in ``first``
    u_mat = np.moveaxis(second, 1, -1).reshape(-1, second.shape[1])
    v_mat = first.reshape(first.shape[0], -1).T
    gram_u = np.linalg.norm(u_mat.T @ u_mat)
    gram_v = np.linalg.norm(v_mat.T @ v_mat)
    return G_U / (gram_v + eps), G_V / (gram_u + eps)


# ---------------------------------------------------------------------------
# Centering
# ---------------------------------------------------------------------------

def _check_probs(probs, n):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise DomainError("cluster probabilities must be a simplex vector of matching length")
    return probs


def center_additive(base, adaptors, cluster_probs):
    """Move the probability-weighted mean adaptor into ``base``.

    Works for any additive adaptor (biases, norm deltas, dense deltas):
    ``base + mean`` and ``a_c - mean``.
    """
    adaptors = [np.asarray(a, dtype=np.float64) for a in adaptors]
    probs = _check_probs(cluster_probs, len(adaptors))
    mean = sum(p * a for p, a in zip(probs, adaptors))
    return np.asarray(base, dtype=np.float64) + mean, [a - mean for a in adaptors]


def center_loras(base, loras, cluster_probs, p_exp=2.0, q_exp=2.0):
    """Center LoRAs around zero, refactoring residuals by truncated SVD.

    ``base <- base + E_c[U_c V_c^T]`` and each ``U_c V_c^T`` is replaced by the
    rank-r truncation of ``U_c V_c^T - E_c[U_c V_c^T]``, split as
    ``U S^(1/p)``, ``V S^(1/q)`` with ``1/p + 1/q = 1``.
    """
    base = as_matrix(base, "base")
    if not loras:
        raise ShapeError("need at least one LoRA")
    shapes = {(lo.shape, lo.rank) for lo in loras}
    if len(shapes) != 1 or loras[0].shape != base.shape:
        raise ShapeError("all LoRAs must share the base shape and rank")
    if abs(1.0 / p_exp + 1.0 / q_exp - 1.0) > 1e-12:
        raise DomainError("split exponents must satisfy 1/p + 1/q = 1")
    probs = _check_probs(cluster_probs, len(loras))
    products = [lo.materialize() for lo in loras]
    mean = sum(p * m for p, m in zip(probs, products))
    r = loras[0].rank
    out = []
    for prod in products:
        u, s, v = truncated_svd(prod - mean, r)
        out.append(LinearLoRA(u * s ** (1.0 / p_exp), v * s ** (1.0 / q_exp)))
    return base + mean, out


# ---------------------------------------------------------------------------
# BatchNorA
# ---------------------------------------------------------------------------

def batch_norm(x, mean, var, gamma, beta, eps=0.0):
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def batchnora_reparam(base_stats, adaptor_stats, gamma_i, beta_i, eps=0.0):
    """Arguments ``(gamma~, beta~)`` fed to the adaptor's batch norm.

    ``gamma~ = (sigma_i / sigma) gamma_i`` and
    ``beta~ = beta_i + (mu_i - mu) / sigma * sg(gamma_i)``. Only the forward
    value is computed here; ``gamma_i`` enters ``beta~`` as a constant.
    """
    (mu, var), (mu_i, var_i) = base_stats, adaptor_stats
    if np.any(np.asarray(var) + eps <= 0) or np.any(np.asarray(var_i) + eps <= 0):
        raise NumericalError("batch-norm variances must be positive")
    sigma, sigma_i = np.sqrt(var + eps), np.sqrt(var_i + eps)
    return sigma_i / sigma * gamma_i, beta_i + (mu_i - mu) / sigma * gamma_i


def batchnora_forward(x, base_stats, adaptor_stats, gamma, beta, gamma_i, beta_i, eps=0.0):
    """Base batch norm plus the reparameterized adaptor batch norm."""
    mu, var = base_stats
    mu_i, var_i = adaptor_stats
    g_t, b_t = batchnora_reparam(base_stats, adaptor_stats, gamma_i, beta_i, eps)
    return batch_norm(x, mu, var, gamma, beta, eps) + batch_norm(x, mu_i, var_i, g_t, b_t, eps)
