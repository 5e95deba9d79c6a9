"""Dense linear algebra and randomness substrate.

Matrices are 2-D ``float64`` numpy arrays and kernels are 4-D arrays laid out
as ``(c_out, c_in, k1, k2)``. Inputs to :func:`conv2d_valid` are batched as
``(batch, c_in, height, width)``.
"""
from __future__ import annotations

import zlib

import numpy as np

from .errors import NumericalError, RankError, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "relu",
    "conv2d_valid",
    "truncated_svd",
    "jacobi_svd",
    "rng_stream",
]


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} has non-finite entries")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x):
    return np.maximum(x, 0.0)


def conv2d_valid(kernel, x):
    """Stride-1, unpadded cross-correlation of a batch ``x`` with ``kernel``.

    ``out[n, i, p, q] = sum_{j,a,b} kernel[i, j, a, b] * x[n, j, p + a, q + b]``
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.ndim != 4 or x.ndim != 4:
        raise ShapeError("kernel and input must both be 4-D")
    c_out, c_in, k1, k2 = kernel.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    if h < k1 or w < k2:
        raise ShapeError(f"input {h}x{w} smaller than kernel {k1}x{k2}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (k1, k2), axis=(2, 3))
    # windows: (n, c_in, h-k1+1, w-k2+1, k1, k2)
    return np.einsum("njpqab,ijab->nipq", windows, kernel, optimize=True)


def _complete_orthonormal(q, keep):
    """Replace columns of ``q`` not flagged in ``keep`` with an orthonormal completion."""
    m, n = q.shape
    basis = [q[:, i] for i in range(n) if keep[i]]
    out = q.copy()
    candidates = iter(np.eye(m))
    for i in range(n):
        if keep[i]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                v /= norm
                basis.append(v)
                out[:, i] = v
                break
        else:  # pragma: no cover - m >= n guarantees a completion exists
            raise NumericalError("could not complete orthonormal basis")
    return out


def jacobi_svd(a, tol=1e-15, max_sweeps=100):
    """Thin SVD of ``a`` by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, S, V)`` with ``a = U @ diag(S) @ V.T``, singular values sorted
    in descending order and ``U``, ``V`` with orthonormal columns.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        v, s, u = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return u, s, v
    work = a.copy()
    v = np.eye(n)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = work[:, i], work[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                work[:, [i, j]] = np.column_stack((c * wi - s * wj, s * wi + c * wj))
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise NumericalError(
            f"Jacobi SVD did not converge after {max_sweeps} sweeps", iterations=max_sweeps)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    cutoff = max(m, n) * np.finfo(float).eps * (sigma[0] if n else 0.0)
    keep = sigma > cutoff
    u = np.zeros_like(work)
    u[:, keep] = work[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not np.all(keep):
        u = _complete_orthonormal(u, keep)
    return u, sigma, v


def truncated_svd(a, r):
    """Best rank-``r`` factorization ``(U, S, V)`` of ``a`` in Frobenius norm."""
    a = as_matrix(a, "a")
    if not 1 <= r <= min(a.shape):
        raise RankError(f"rank {r} out of range for shape {a.shape}")
    u, s, v = jacobi_svd(a)
    return u[:, :r], s[:r], v[:, :r]


def _stream_key(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    # strings are hashed with a fixed checksum so keys are stable across processes
    return zlib.crc32(str(part).encode("utf-8"))


def rng_stream(seed, *stream_id):
    """Independent, reproducible generator for ``(seed, *stream_id)``.

    Stream ids may mix integers and short strings, e.g.
    ``rng_stream(7, "cohort", round_idx)``.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_stream_key(p) for p in stream_id))
    return np.random.Generator(np.random.PCG64(seq))
