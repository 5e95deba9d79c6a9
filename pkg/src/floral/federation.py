"""FLoRAL Averaging and baselines, simulated in a single process.

Each round the server samples a cohort, every sampled client runs ``H``
simultaneous gradient steps on its weights and router logits starting from
the broadcast model, and the server averages the returns: base layers
weighted by ``N^k``, adaptor ``c`` weighted by ``pi^k_c N^k``. Router logits
stay on the clients.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adaptors import BudgetSpec, center_additive, center_loras, linear_rank_for_budget
from .errors import ConfigError, DivergenceError, ProtocolError
from .metrics import cluster_probs, router_accuracy, tv_mismatch
from .mixed_model import (
    AdaptorSet,
    MixedModel,
    ROUTER_MODES,
    Router,
    apply_step,
    cluster_losses,
    dense_adaptor_set,
    fml_loss,
    init_base,
    loss_and_grad,
    lora_adaptor_set,
)
from .numerics import rng_stream

METHODS = ("floral", "fedavg", "ensemble", "local_adaptor", "floral_opt_router",
           "ensemble_opt_router")


@dataclass
class MethodSpec:
    """Which model family is federated and how clients route.

    ``rank`` overrides the budget rule for every LoRA when set. ``lora=False``
    and ``bias_adaptors=False`` together leave FLoRAL with no adaptors.
    """

    name: str = "floral"
    C: int = 2
    rho: float = 0.25
    rank: int | None = None
    lora: bool = True
    bias_adaptors: bool = True
    bias: bool = False

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}", field="method.name")
        if int(self.C) != self.C or self.C < 1:
            raise ConfigError("must be a positive integer", field="method.C")
        if not 0 < self.rho <= 1:
            raise ConfigError("must lie in (0, 1]", field="method.rho")
        if self.rank is not None and self.rank < 1:
            raise ConfigError("must be >= 1", field="method.rank")

    @property
    def base_method(self):
        return self.name.replace("_opt_router", "")

    @property
    def optimal_router(self):
        return self.name.endswith("_opt_router")

    @property
    def has_router(self):
        return self.base_method in ("floral", "ensemble")

    @property
    def n_clusters(self):
        return self.C if self.has_router else 1


@dataclass
class TrainConfig:
    rounds: int = 500
    local_steps: int = 5
    eta: float = 0.1
    router_eta: float | None = None
    schedule: str = "constant"
    schedule_s: float = 100.0
    cohort_fraction: float = 1.0
    router_mode: str = "softmax_sgd"
    stateless: bool = False
    precondition: float | None = None
    center_every: int = 0
    batch_size: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("must be >= 0", field="train.rounds")
        if self.local_steps < 1:
            raise ConfigError("must be >= 1", field="train.local_steps")
        if self.eta < 0:
            raise ConfigError("must be >= 0", field="train.eta")
        if self.router_eta is not None and self.router_eta < 0:
            raise ConfigError("must be >= 0", field="train.router_eta")
        if self.schedule not in ("constant", "inverse"):
            raise ConfigError("must be 'constant' or 'inverse'", field="train.schedule")
        if self.schedule_s <= 0:
            raise ConfigError("must be positive", field="train.schedule_s")
        if not 0 < self.cohort_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", field="train.cohort_fraction")
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"must be one of {ROUTER_MODES}", field="train.router_mode")
        if self.precondition is not None and self.precondition <= 0:
            raise ConfigError("must be positive or null", field="train.precondition")
        if self.center_every < 0:
            raise ConfigError("must be >= 0", field="train.center_every")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("must be >= 1 or null", field="train.batch_size")
        if self.workers < 1:
            raise ConfigError("must be >= 1", field="train.workers")

    def eta_at(self, step):
        if self.schedule == "inverse":
            return self.eta * self.schedule_s / (self.schedule_s + step)
        return self.eta

    def router_eta_at(self, step):
        base = self.eta if self.router_eta is None else self.router_eta
        if self.schedule == "inverse":
            return base * self.schedule_s / (self.schedule_s + step)
        return base


@dataclass
class ClientState:
    id: int
    X: np.ndarray
    Y: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray
    router: Router | None = None
    local_adaptor: AdaptorSet | None = None

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def pi(self):
        return np.ones(1) if self.router is None else self.router.pi


@dataclass
class ServerState:
    model: MixedModel
    method: MethodSpec
    round: int = 0

    @property
    def communicates_adaptors(self):
        return self.method.base_method in ("floral", "ensemble")


@dataclass
class ClientReturn:
    client_id: int
    n: int
    pi: np.ndarray
    base: list
    adaptors: list | None
    loss: float


@dataclass
class RoundReport:
    round: int
    clients: list
    train_losses: dict
    test_loss: float
    client_test_losses: list
    routers: np.ndarray | None
    router_accuracy: float | None
    tv_per_cluster: list | None
    wall_time: float = 0.0

    @property
    def train_loss(self):
        return float(np.mean(list(self.train_losses.values())))


# ---------------------------------------------------------------------------
# protocol pieces
# ---------------------------------------------------------------------------

def sample_cohort(K, fraction, rng):
    """Uniform sample of ``round(fraction K)`` (at least one) distinct ids, ascending."""
    if not 0 < fraction <= 1:
        raise ConfigError("cohort fraction must lie in (0, 1]")
    size = max(1, round(fraction * K))
    if size >= K:
        return list(range(K))
    return sorted(int(i) for i in rng.choice(K, size=size, replace=False))


def optimal_router_override(task, method):
    """Ground-truth one-hot routers ``pi*`` for every client."""
    if not method.has_router:
        raise ConfigError(f"method {method.name!r} has no routers to override", field="method.name")
    if method.C != task.C:
        raise ConfigError(f"optimal routing needs C == {task.C}", field="method.C")
    return task.pi_star.copy()


def local_train(client, model, steps, train, round_idx=0, step_offset=0, seed=0):
    """Run ``steps`` gradient steps on ``model`` (modified in place) for ``client``.

    Returns the final local FML loss. The client's router is updated in place.
    """
    router = client.router
    if router is not None and router.learnable and train.stateless:
        router.theta = np.zeros_like(router.theta)
    rng = rng_stream(seed, "batch", round_idx, client.id) if train.batch_size else None
    X, Y = client.X, client.Y
    for h in range(steps):
        if rng is not None and train.batch_size < client.n:
            idx = np.sort(rng.choice(client.n, size=train.batch_size, replace=False))
            X, Y = client.X[idx], client.Y[idx]
        pi = client.pi
        loss, grads = loss_and_grad(model, pi, X, Y, precondition=train.precondition)
        if not np.isfinite(loss):
            raise DivergenceError(round_idx, client.id, loss)
        t = step_offset + h
        apply_step(model, router, grads, train.eta_at(t), train.router_eta_at(t))
    if router is not None and router.learnable and router.mode == "exp_weights":
        prior = np.zeros_like(router.theta) if train.stateless else router.theta
        losses = cluster_losses(model, client.X, client.Y)
        router.theta = prior - train.router_eta_at(step_offset + steps) * losses
    final = fml_loss(model, client.pi, client.X, client.Y)
    if not np.isfinite(final):
        raise DivergenceError(round_idx, client.id, final)
    return final


def _weighted_update(current, returned, weights):
    """``current + sum_k w_k (x_k - current)`` with ``w`` normalized.

    Equal to the weighted mean, and exactly ``current`` when nothing moved.
    """
    total = float(np.sum(weights))
    out = []
    for i, cur in enumerate(current):
        acc = np.zeros_like(cur)
        for w, arrays in zip(weights, returned):
            if w:
                acc += (w / total) * (arrays[i] - cur)
        out.append(cur + acc)
    return out


def aggregate(server, returns):
    """Synchronize base layers (``N^k``-weighted) and adaptors (``pi^k_c N^k``-weighted)."""
    if not returns:
        raise ProtocolError("no client returns to aggregate")
    returns = sorted(returns, key=lambda r: r.client_id)
    model = server.model
    n = np.array([r.n for r in returns], dtype=np.float64)
    if n.sum() <= 0:
        raise ProtocolError("total sample weight is zero")
    if model.base_trainable:
        model.set_base_arrays(_weighted_update(model.base_arrays(), [r.base for r in returns], n))
    if server.communicates_adaptors:
        for c, s in enumerate(model.adaptors):
            w = np.array([r.pi[c] * r.n for r in returns])
            if w.sum() <= 0:
                continue  # no mass on this adaptor this round: carry it over
            s.set_arrays(_weighted_update(s.arrays(), [r.adaptors[c] for r in returns], w))
    server.round += 1
    return server


def center_server_adaptors(model, probs, p_exp=2.0, q_exp=2.0):
    """Absorb the mean adaptor into the base for every adapted layer."""
    for i, layer in enumerate(model.base):
        entries = [s.layers[i] for s in model.adaptors]
        if any(e is None for e in entries):
            continue
        if entries[0].lora is not None:
            layer.weight, loras = center_loras(layer.weight, [e.lora for e in entries], probs,
                                               p_exp, q_exp)
            for e, lo in zip(entries, loras):
                e.lora = lo
        elif entries[0].dense is not None:
            layer.weight, dense = center_additive(layer.weight, [e.dense for e in entries], probs)
            for e, d in zip(entries, dense):
                e.dense = d
        if entries[0].bias is not None:
            layer.bias, deltas = center_additive(layer.bias, [e.bias.delta for e in entries], probs)
            for e, d in zip(entries, deltas):
                e.bias.delta = d


# ---------------------------------------------------------------------------
# model construction per method
# ---------------------------------------------------------------------------

def build_server_model(task, method, seed):
    family = task.family
    dims = task.model_dims
    base_method = method.base_method
    base_rng = rng_stream(seed, "base")
    if base_method == "ensemble":
        base = init_base(family, dims, base_rng, bias=method.bias, zero=True)
        rng = rng_stream(seed, "adaptors")
        sets = [dense_adaptor_set(base, rng) for _ in range(method.C)]
        return MixedModel(family, base, sets, base_trainable=False)
    base = init_base(family, dims, base_rng, bias=method.bias)
    if base_method == "floral" and (method.lora or method.bias_adaptors):
        sets = [_lora_set(base, method, rng_stream(seed, "adaptors", c)) for c in range(method.C)]
        return MixedModel(family, base, sets)
    if base_method == "floral":
        return MixedModel(family, base, [AdaptorSet([None] * len(base)) for _ in range(method.C)])
    return MixedModel(family, base)


def _lora_set(base, method, rng):
    spec = BudgetSpec(method.rho)
    ranks = [method.rank or linear_rank_for_budget(*layer.shape, spec) for layer in base]
    s = lora_adaptor_set(base, ranks, rng, bias=method.bias_adaptors)
    if not method.lora:
        for la in s.layers:
            la.lora = None
        s = AdaptorSet([la if la.bias is not None else None for la in s.layers])
    return s


class FederatedRun:
    """Server and client state for one experiment; advance with :meth:`step`."""

    def __init__(self, task, method, train=None, seed=0):
        self.task = task
        self.method = method
        self.train = train or TrainConfig()
        self.seed = seed
        if method.optimal_router:
            optimal_router_override(task, method)
        self.server = ServerState(build_server_model(task, method, seed), method)
        self.clients = []
        pi_star = task.pi_star if method.optimal_router else None
        for k, s in enumerate(task.splits):
            router = None
            if method.has_router:
                router = (Router.frozen(pi_star[k]) if pi_star is not None
                          else Router.uniform(method.C, self.train.router_mode))
            local = None
            if method.base_method == "local_adaptor":
                local = _lora_set(self.server.model.base, method,
                                  rng_stream(seed, "local-adaptor", k))
            self.clients.append(ClientState(k, s.X_train, s.Y_train, s.X_test, s.Y_test,
                                            router, local))
        self.reports = []

    @property
    def round(self):
        return self.server.round

    @property
    def N(self):
        return np.array([c.n for c in self.clients])

    def routers(self):
        if not self.method.has_router:
            return None
        return np.stack([c.pi for c in self.clients])

    def client_model(self, client):
        model = self.server.model.copy()
        if client.local_adaptor is not None:
            model.adaptors = [client.local_adaptor.copy()]
        return model

    def _train_client(self, client):
        model = self.client_model(client)
        H = self.train.local_steps
        loss = local_train(client, model, H, self.train, self.round,
                           self.round * H, self.seed)
        if client.local_adaptor is not None:
            client.local_adaptor = model.adaptors[0]
        adaptors = ([s.arrays() for s in model.adaptors]
                    if self.server.communicates_adaptors else None)
        return ClientReturn(client.id, client.n, client.pi.copy(), model.base_arrays(),
                            adaptors, loss)

    def test_losses(self):
        return [fml_loss(self.client_model(c), c.pi, c.X_test, c.Y_test) for c in self.clients]

    def mismatch(self):
        routers = self.routers()
        if routers is None or routers.shape[1] != self.task.C:
            return None
        return tv_mismatch(routers, self.task.pi_star, self.N, align=True)

    def step(self):
        start = time.perf_counter()
        cohort = sample_cohort(len(self.clients), self.train.cohort_fraction,
                               rng_stream(self.seed, "cohort", self.round))
        clients = [self.clients[k] for k in cohort]
        if self.train.workers > 1 and len(clients) > 1:
            with ThreadPoolExecutor(self.train.workers) as pool:
                returns = list(pool.map(self._train_client, clients))
        else:
            returns = [self._train_client(c) for c in clients]
        aggregate(self.server, returns)
        if (self.train.center_every and self.method.base_method == "floral"
                and self.server.round % self.train.center_every == 0):
            probs = cluster_probs(self.routers(), self.N)[1]
            center_server_adaptors(self.server.model, probs)

        test = self.test_losses()
        routers = self.routers()
        acc = tv = None
        if routers is not None and routers.shape[1] == self.task.C:
            acc = router_accuracy(routers, self.task.pi_star)
            tv = [float(v) for v in self.mismatch().per_cluster]
        report = RoundReport(
            round=self.server.round,
            clients=cohort,
            train_losses={r.client_id: r.loss for r in returns},
            test_loss=float(np.mean(test)),
            client_test_losses=test,
            routers=routers,
            router_accuracy=acc,
            tv_per_cluster=tv,
            wall_time=time.perf_counter() - start,
        )
        self.reports.append(report)
        return report

    def run(self, rounds=None, callback=None):
        rounds = self.train.rounds if rounds is None else rounds
        out = []
        for _ in range(rounds):
            report = self.step()
            if callback is not None:
                callback(report)
            out.append(report)
        return out


def run_experiment(task, method, train=None, seed=0, rounds=None, callback=None):
    """Run FLoRAL or a baseline on ``task`` and return one report per round."""
    return FederatedRun(task, method, train, seed).run(rounds, callback)
