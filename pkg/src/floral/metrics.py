"""Analysis-side quantities computed from router snapshots and model specs."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .adaptors import BudgetSpec, linear_rank_for_budget
from .errors import DomainError

EXHAUSTIVE_MAX_C = 8


def _routers(pi, name="pi"):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2:
        raise DomainError(f"{name} must be a (K, C) array")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9):
        raise DomainError(f"rows of {name} must lie on the simplex")
    return pi


def cluster_probs(pi, N):
    """Joint, marginal and client-given-cluster probabilities.

    ``p(k, c) = N^k / N * pi^k_c``, ``p(c) = sum_k p(k, c)`` and
    ``p(k | c) = pi^k_c N^k / sum_k' pi^k'_c N^k'``. Columns of ``p(k | c)``
    for clusters with zero mass are left at zero.

    Returns ``(p_kc, p_c, p_k_given_c, defined)`` where ``defined`` flags the
    clusters with positive mass.
    """
    pi = _routers(pi)
    N = np.asarray(N, dtype=np.float64)
    if N.shape != (pi.shape[0],) or np.any(N < 1):
        raise DomainError("sample counts must be >= 1, one per client")
    p_kc = pi * (N / N.sum())[:, None]
    p_c = p_kc.sum(axis=0)
    mass = (pi * N[:, None]).sum(axis=0)
    defined = mass > 0
    p_k_given_c = np.zeros_like(pi)
    p_k_given_c[:, defined] = (pi * N[:, None])[:, defined] / mass[defined]
    return p_kc, p_c, p_k_given_c, defined


def best_permutation(pi_hat, pi_star, hard=True):
    """Relabeling ``perm`` so column ``perm[c]`` of ``pi_hat`` matches cluster ``c`` of ``pi_star``.

    ``hard`` scores agreement of argmax assignments, otherwise the soft
    overlap ``sum_k pi_hat^k . pi_star^k``. Exhaustive for ``C <= 8``, linear
    assignment above.
    """
    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    pi_star = np.asarray(pi_star, dtype=np.float64)
    C = pi_star.shape[1]
    if pi_hat.shape != pi_star.shape:
        raise DomainError("router arrays must have equal shapes")
    if hard:
        eye = np.eye(C)
        score = eye[np.argmax(pi_hat, axis=1)].T @ eye[np.argmax(pi_star, axis=1)]
    else:
        score = pi_hat.T @ pi_star
    # score[a, b]: agreement between estimated label a and true label b
    if C <= EXHAUSTIVE_MAX_C:
        best, best_val = None, -math.inf
        for perm in itertools.permutations(range(C)):
            val = sum(score[perm[b], b] for b in range(C))
            if val > best_val:
                best, best_val = perm, val
        return np.array(best)
    rows, cols = linear_sum_assignment(-score)
    perm = np.empty(C, dtype=int)
    perm[cols] = rows
    return perm


def router_accuracy(pi_hat, pi_star):
    """Fraction of clients whose argmax cluster matches, up to relabeling."""
    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    pi_star = np.asarray(pi_star, dtype=np.float64)
    perm = best_permutation(pi_hat, pi_star, hard=True)
    aligned = pi_hat[:, perm]
    return float(np.mean(np.argmax(aligned, axis=1) == np.argmax(pi_star, axis=1)))


@dataclass
class MismatchReport:
    per_cluster: np.ndarray
    per_client: np.ndarray
    undefined_clusters: list = field(default_factory=list)
    permutation: np.ndarray | None = None


def tv_mismatch(pi_hat, pi_star, N, align=False):
    """Total-variation aggregation mismatch between estimated and true routers.

    Per cluster ``||p_hat(.|c) - p*(.|c)||_1``; per client
    ``||pi*^k - pi_hat^k||_1``. With ``align=True`` the estimated clusters are
    first relabeled to best match the ground truth (learned cluster labels are
    arbitrary). A cluster with no estimated mass is flagged and scored against
    the zero measure.
    """
    pi_hat = _routers(pi_hat, "pi_hat")
    pi_star = _routers(pi_star, "pi_star")
    if pi_hat.shape != pi_star.shape:
        raise DomainError("router arrays must have equal shapes")
    perm = None
    if align:
        perm = best_permutation(pi_hat, pi_star, hard=False)
        pi_hat = pi_hat[:, perm]
    _, _, p_hat, defined = cluster_probs(pi_hat, N)
    _, _, p_star, _ = cluster_probs(pi_star, N)
    per_cluster = np.abs(p_hat - p_star).sum(axis=0)
    per_client = np.abs(pi_star - pi_hat).sum(axis=1)
    return MismatchReport(per_cluster, per_client, [int(c) for c in np.flatnonzero(~defined)], perm)


def jensen_gap(model, pi, X, Y):
    """``MFL - FML``; nonnegative for the convex (linear) family."""
    from .mixed_model import fml_loss, mfl_objective
    return mfl_objective(model, pi, X, Y) - fml_loss(model, pi, X, Y)


# ---------------------------------------------------------------------------
# parameter audit
# ---------------------------------------------------------------------------

@dataclass
class ParamAudit:
    base: int
    added: int
    items: dict

    @property
    def ratio(self):
        return self.added / self.base if self.base else math.inf

    def bound(self):
        """Budget allowance plus every itemized excess term."""
        return self.items.get("budget", 0.0) + sum(
            v for k, v in self.items.items() if k.endswith("_excess") or k == "bias")


def param_audit(layers, method, C=1, rho=None, bias_adaptors=True, n_clients=None):
    """Count base and added parameters by building the adaptors a method stores.

    ``layers`` is a list of ``(d_out, d_in, has_bias)``. Methods:
    ``fedavg``, ``floral``, ``ensemble``, ``local_adaptor`` (counted per
    client, or for all ``n_clients`` when given). ``items`` itemizes the added
    count: LoRA budget allowance ``C rho d``, the excess from the minimum-rank
    clamp, and bias adaptor entries.
    """
    from .mixed_model import Dense, dense_adaptor_set, lora_adaptor_set
    from .numerics import rng_stream

    base = [Dense(np.zeros((m, n)), np.zeros(m) if b else None) for m, n, b in layers]
    base_count = sum(a.size for layer in base for a in layer.arrays())
    weight_count = sum(m * n for m, n, _ in layers)
    rng = rng_stream(0, "audit")
    if method == "fedavg":
        return ParamAudit(base_count, 0, {})
    if method == "ensemble":
        sets = [dense_adaptor_set(base, rng) for _ in range(C)]
        stored = sum(s.num_params for s in sets)
        # C copies of the full model, one of which stands in for the base
        return ParamAudit(base_count, stored - base_count, {"copies": C - 1})
    if method in ("floral", "local_adaptor"):
        if rho is None:
            raise DomainError(f"{method} audit needs rho")
        spec = BudgetSpec(rho)
        ranks = [linear_rank_for_budget(m, n, spec) for m, n, _ in layers]
        copies = C if method == "floral" else (n_clients or 1)
        sets = [lora_adaptor_set(base, ranks, rng, bias=bias_adaptors) for _ in range(copies)]
        added = sum(s.num_params for s in sets)
        budget = copies * rho * weight_count
        lora = sum(la.lora.num_params for s in sets for la in s.layers if la is not None)
        bias = sum(la.bias.num_params for s in sets for la in s.layers
                   if la is not None and la.bias is not None)
        clamp_excess = 0
        for (m, n, _), r in zip(layers, ranks):
            if math.floor(rho * m * n / (m + n)) < 1:
                clamp_excess += copies * max(0.0, (m + n) * r - rho * m * n)
        items = {"budget": budget, "lora": lora, "clamp_excess": clamp_excess, "bias": bias}
        return ParamAudit(base_count, added, items)
    raise DomainError(f"unknown method {method!r}")
