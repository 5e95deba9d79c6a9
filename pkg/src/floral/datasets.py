"""Synthetic clustered regression tasks with low-rank cluster structure.

Client ``k`` belongs to cluster ``k mod C``. Linear targets are
``y = (W + alpha U_c V_c^T) x`` and MLP targets ``y = Phi relu((W + U_c V_c^T) x)``,
with ``x ~ N(0, I)`` and every ground-truth parameter drawn elementwise from
``N(0, 1/sqrt(d_in))`` where ``d_in`` is the input dimension of the map it
belongs to.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .numerics import relu, rng_stream

TASK_FORMAT = "floral-task"
TASK_FORMAT_VERSION = 1
DEFAULT_TEST_SIZE = 256


@dataclass
class ClientSplit:
    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray

    @property
    def n_train(self):
        return self.X_train.shape[0]


@dataclass
class SyntheticTask:
    family: str
    K: int
    C: int
    d_x: int
    d_y: int
    d_h: int | None
    r_true: int
    alpha: float
    seed: int
    W: np.ndarray
    U: list
    V: list
    Phi: np.ndarray | None
    pi_star: np.ndarray
    splits: list
    width_mult: int = 1
    keep_fraction: float = 1.0

    @property
    def cluster_of(self):
        return np.argmax(self.pi_star, axis=1)

    @property
    def n_train(self):
        return np.array([s.n_train for s in self.splits])

    @property
    def model_dims(self):
        """Layer widths of the model trained on this task (hidden layer widened)."""
        if self.family == "linear":
            return (self.d_x, self.d_y)
        return (self.d_x, self.width_mult * self.d_h, self.d_y)

    def cluster_map(self, c):
        return self.W + self.alpha * self.U[c] @ self.V[c].T

    def target(self, k, X):
        """Ground-truth outputs for client ``k`` on inputs ``X`` (rows are samples)."""
        first = sum(p * self.cluster_map(c) for c, p in enumerate(self.pi_star[k]))
        hidden = X @ first.T
        if self.family == "linear":
            return hidden
        return relu(hidden) @ self.Phi.T


def diagonal_assignment(K, C):
    pi = np.zeros((K, C))
    pi[np.arange(K), np.arange(K) % C] = 1.0
    return pi


def _normal(rng, shape, d_in):
    return rng.normal(0.0, 1.0 / math.sqrt(d_in), size=shape)


def _check_dims(**dims):
    for name, value in dims.items():
        if value is None or int(value) != value or value < 1:
            raise ConfigError(f"must be a positive integer, got {value!r}", field=name)


def build_task(family, W, U, V, Phi, K, n_train, *, alpha=1.0, seed=0,
               test_size=DEFAULT_TEST_SIZE, width_mult=1):
    """Sample per-client inputs for explicit ground-truth parameters."""
    C = len(U)
    if C > K:
        raise ConfigError("need at least as many clients as clusters", field="C")
    d_hid, d_x = W.shape
    r = U[0].shape[1]
    if family == "linear":
        d_y, d_h = d_hid, None
    else:
        d_y, d_h = Phi.shape[0], d_hid
    pi_star = diagonal_assignment(K, C)
    task = SyntheticTask(family, K, C, d_x, d_y, d_h, r, float(alpha), seed,
                         np.asarray(W, float), [np.asarray(u, float) for u in U],
                         [np.asarray(v, float) for v in V],
                         None if Phi is None else np.asarray(Phi, float),
                         pi_star, [], width_mult)
    for k in range(K):
        rng = rng_stream(seed, "client-data", k)
        X_tr = rng.standard_normal((n_train, d_x))
        X_te = rng.standard_normal((test_size, d_x))
        task.splits.append(ClientSplit(X_tr, task.target(k, X_tr), X_te, task.target(k, X_te)))
    return task


def gen_linear_task(K=10, C=2, d_x=16, d_y=16, r_true=2, alpha=4.0, seed=0,
                    test_size=DEFAULT_TEST_SIZE):
    _check_dims(K=K, C=C, d_x=d_x, d_y=d_y, r_true=r_true)
    if C > K:
        raise ConfigError("need at least as many clients as clusters", field="C")
    rng = rng_stream(seed, "task-params")
    W = _normal(rng, (d_y, d_x), d_x)
    U = [_normal(rng, (d_y, r_true), r_true) for _ in range(C)]
    V = [_normal(rng, (d_x, r_true), d_x) for _ in range(C)]
    n_train = max(1, round(0.25 * d_x * d_y))
    return build_task("linear", W, U, V, None, K, n_train, alpha=alpha, seed=seed,
                      test_size=test_size)


def gen_mlp_task(K=20, C=4, d_x=16, d_h=16, d_y=8, r_true=2, width_mult=2, seed=0,
                 test_size=DEFAULT_TEST_SIZE):
    _check_dims(K=K, C=C, d_x=d_x, d_h=d_h, d_y=d_y, r_true=r_true, width_mult=width_mult)
    if C > K:
        raise ConfigError("need at least as many clients as clusters", field="C")
    rng = rng_stream(seed, "task-params")
    W = _normal(rng, (d_h, d_x), d_x)
    U = [_normal(rng, (d_h, r_true), r_true) for _ in range(C)]
    V = [_normal(rng, (d_x, r_true), d_x) for _ in range(C)]
    Phi = _normal(rng, (d_y, d_h), d_h)
    n_train = max(1, round(0.5 * d_h * d_x))
    return build_task("mlp2", W, U, V, Phi, K, n_train, seed=seed, test_size=test_size,
                      width_mult=width_mult)


def reduce_data(task, keep_fraction):
    """Keep the first ``ceil(keep_fraction * N^k)`` (at least one) training samples per client."""
    if not 0.0 < keep_fraction <= 1.0:
        raise DomainError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    splits = []
    for s in task.splits:
        n = max(1, math.ceil(keep_fraction * s.n_train))
        splits.append(ClientSplit(s.X_train[:n], s.Y_train[:n], s.X_test, s.Y_test))
    return dataclasses.replace(task, splits=splits,
                               keep_fraction=task.keep_fraction * keep_fraction)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_SCALARS = ("family", "K", "C", "d_x", "d_y", "d_h", "r_true", "alpha", "seed",
            "width_mult", "keep_fraction")


def save_task(task, path):
    """Write ``task`` as an ``.npz`` archive with a versioned JSON header."""
    header = {"format": TASK_FORMAT, "version": TASK_FORMAT_VERSION}
    header.update({k: getattr(task, k) for k in _SCALARS})
    arrays = {"W": task.W, "pi_star": task.pi_star,
              "U": np.stack(task.U), "V": np.stack(task.V)}
    if task.Phi is not None:
        arrays["Phi"] = task.Phi
    for k, s in enumerate(task.splits):
        for name in ("X_train", "Y_train", "X_test", "Y_test"):
            arrays[f"{name}_{k}"] = getattr(s, name)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_task(path):
    with open(path, "rb") as fh:
        data = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    header = json.loads(str(data["header"]))
    if header.get("format") != TASK_FORMAT:
        raise ConfigError(f"{path} is not a task file")
    if header.get("version") != TASK_FORMAT_VERSION:
        raise ConfigError(f"unsupported task file version {header.get('version')}")
    splits = [ClientSplit(*(data[f"{name}_{k}"] for name in
                            ("X_train", "Y_train", "X_test", "Y_test")))
              for k in range(header["K"])]
    return SyntheticTask(
        family=header["family"], K=header["K"], C=header["C"], d_x=header["d_x"],
        d_y=header["d_y"], d_h=header["d_h"], r_true=header["r_true"], alpha=header["alpha"],
        seed=header["seed"], W=data["W"], U=list(data["U"]), V=list(data["V"]),
        Phi=data["Phi"] if "Phi" in data else None, pi_star=data["pi_star"], splits=splits,
        width_mult=header["width_mult"], keep_fraction=header["keep_fraction"])
