import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from floral.datasets import gen_linear_task
from floral.errors import ConfigError, DivergenceError, ProtocolError
from floral.federation import (
    ClientReturn,
    ClientState,
    FederatedRun,
    MethodSpec,
    ServerState,
    TrainConfig,
    aggregate,
    center_server_adaptors,
    local_train,
    optimal_router_override,
    run_experiment,
    sample_cohort,
)
from floral.metrics import cluster_probs
from floral.mixed_model import Dense, MixedModel, Router
from floral.numerics import rng_stream

from helpers import pooled_lstsq_floor, random_model, report_key


@pytest.fixture(scope="module")
def small_task():
    return gen_linear_task(K=4, C=2, d_x=4, d_y=3, seed=1)


# -- cohort sampling -----------------------------------------------------------

def test_full_participation():
    assert sample_cohort(7, 1.0, np.random.default_rng(0)) == list(range(7))


def test_ten_percent_of_300():
    ids = sample_cohort(300, 0.1, np.random.default_rng(0))
    assert len(ids) == len(set(ids)) == 30
    assert all(0 <= i < 300 for i in ids)


def test_cohort_deterministic():
    seq = [sample_cohort(50, 0.2, rng_stream(3, "cohort", t)) for t in range(5)]
    again = [sample_cohort(50, 0.2, rng_stream(3, "cohort", t)) for t in range(5)]
    assert seq == again
    assert len({tuple(s) for s in seq}) > 1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(1e-3, 1.0), st.integers(0, 2**32 - 1))
def test_cohort_size_and_range(K, p, seed):
    ids = sample_cohort(K, p, np.random.default_rng(seed))
    assert len(ids) == max(1, round(p * K)) or len(ids) == K
    assert ids == sorted(set(ids)) and 0 <= ids[0] and ids[-1] < K


def test_cohort_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        sample_cohort(10, 0.0, np.random.default_rng(0))


# -- local training ------------------------------------------------------------

def make_client(rng, n=6, d_x=3, d_y=2, router=None):
    X, Y = rng.normal(size=(n, d_x)), rng.normal(size=(n, d_y))
    return ClientState(0, X, Y, X, Y, router)


def test_zero_rate_leaves_everything_unchanged():
    rng = np.random.default_rng(0)
    model = random_model(rng, C=2)
    client = make_client(rng, router=Router(np.array([0.3, -0.2])))
    before = [a.copy() for a in model.base_arrays()] + [a.copy() for s in model.adaptors
                                                          for a in s.arrays()]
    theta = client.router.theta.copy()
    local_train(client, model, 1, TrainConfig(eta=0.0))
    after = model.base_arrays() + [a for s in model.adaptors for a in s.arrays()]
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(client.router.theta, theta)


def test_single_cluster_is_plain_sgd():
    rng = np.random.default_rng(1)
    W0 = rng.normal(size=(2, 3))
    model = MixedModel("linear", [Dense(W0.copy())])
    client = make_client(rng, router=Router.uniform(1))
    local_train(client, model, 4, TrainConfig(eta=0.05))
    W = W0.copy()
    for _ in range(4):
        resid = client.X @ W.T - client.Y
        W = W - 0.05 * 2 * resid.T @ client.X / resid.size
    np.testing.assert_allclose(model.base[0].weight, W, atol=1e-14)
    np.testing.assert_array_equal(client.router.theta, 0.0)


def test_quadratic_toy_matches_scalar_sgd():
    x = np.array([[1.0], [2.0], [-1.0]])
    y = np.array([[2.0], [3.0], [0.5]])
    model = MixedModel("linear", [Dense(np.array([[0.5]]))])
    client = ClientState(0, x, y, x, y)
    loss = local_train(client, model, 3, TrainConfig(eta=0.1))
    w = 0.5
    for _ in range(3):
        w -= 0.1 * sum(2 * (w * xi - yi) * xi for xi, yi in zip(x[:, 0], y[:, 0])) / 3
    assert model.base[0].weight[0, 0] == pytest.approx(w, abs=1e-15)
    assert loss == pytest.approx(sum((w * a - b) ** 2 for a, b in zip(x[:, 0], y[:, 0])) / 3,
                                 abs=1e-14)


def test_stateless_resets_router():
    rng = np.random.default_rng(2)
    model = random_model(rng, C=2)
    client = make_client(rng, router=Router(np.array([5.0, -5.0])))
    local_train(client, model, 1, TrainConfig(eta=0.0, stateless=True))
    np.testing.assert_array_equal(client.router.theta, 0.0)


def test_exp_weights_router_mode():
    rng = np.random.default_rng(3)
    model = random_model(rng, C=2)
    client = make_client(rng, router=Router.uniform(2, "exp_weights"))
    local_train(client, model, 2, TrainConfig(eta=0.01, router_mode="exp_weights"))
    assert np.isclose(client.pi.sum(), 1.0) and not np.allclose(client.pi, 0.5)


def test_divergence_carries_context():
    model = MixedModel("linear", [Dense(np.array([[np.inf]]))])
    client = ClientState(5, np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)))
    with pytest.raises(DivergenceError) as info:
        local_train(client, model, 1, TrainConfig(), round_idx=7)
    assert info.value.round_idx == 7 and info.value.client_id == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_divergence_propagates(small_task):
    with pytest.raises(DivergenceError):
        run_experiment(small_task, MethodSpec("fedavg"), TrainConfig(eta=1e3), rounds=50)


# -- aggregation ---------------------------------------------------------------

def server_and_returns(rng, pis, ns, same=False):
    model = random_model(rng, C=len(pis[0]))
    server = ServerState(model, MethodSpec("floral", C=len(pis[0])))
    returns = []
    for k, (pi, n) in enumerate(zip(pis, ns)):
        if same:
            base = [a.copy() for a in model.base_arrays()]
            ads = [[a.copy() for a in s.arrays()] for s in model.adaptors]
        else:
            base = [rng.normal(size=a.shape) for a in model.base_arrays()]
            ads = [[rng.normal(size=a.shape) for a in s.arrays()] for s in model.adaptors]
        returns.append(ClientReturn(k, n, np.asarray(pi, float), base, ads, 0.0))
    return server, returns


def test_disjoint_routing_takes_each_clients_adaptor():
    server, returns = server_and_returns(np.random.default_rng(0), [[1, 0], [0, 1]], [4, 4])
    aggregate(server, returns)
    for c in range(2):
        for a, b in zip(server.model.adaptors[c].arrays(), returns[c].adaptors[c]):
            np.testing.assert_allclose(a, b, atol=1e-15)


def test_identity_when_nothing_moves():
    rng = np.random.default_rng(1)
    server, returns = server_and_returns(rng, [[0.3, 0.7], [0.9, 0.1], [0.5, 0.5]], [1, 5, 2],
                                         same=True)
    before = [a.copy() for a in server.model.base_arrays()]
    before_ad = [[a.copy() for a in s.arrays()] for s in server.model.adaptors]
    aggregate(server, returns)
    for a, b in zip(before, server.model.base_arrays()):
        np.testing.assert_array_equal(a, b)
    for s, ref in zip(server.model.adaptors, before_ad):
        for a, b in zip(s.arrays(), ref):
            np.testing.assert_array_equal(a, b)
    assert server.round == 1


def test_weighted_mean_oracle():
    rng = np.random.default_rng(2)
    pis = rng.dirichlet(np.ones(2), size=3)
    server, returns = server_and_returns(rng, pis, [1, 2, 3])
    aggregate(server, returns)
    n = np.array([1.0, 2.0, 3.0])
    for i, arr in enumerate(server.model.base_arrays()):
        expected = sum(n[k] * returns[k].base[i] for k in range(3)) / n.sum()
        np.testing.assert_allclose(arr, expected, atol=1e-12)
    for c, s in enumerate(server.model.adaptors):
        w = pis[:, c] * n
        for i, arr in enumerate(s.arrays()):
            expected = sum(w[k] * returns[k].adaptors[c][i] for k in range(3)) / w.sum()
            np.testing.assert_allclose(arr, expected, atol=1e-12)


def test_zero_mass_adaptor_carried_over():
    server, returns = server_and_returns(np.random.default_rng(3), [[1, 0], [1, 0]], [2, 3])
    before = [a.copy() for a in server.model.adaptors[1].arrays()]
    aggregate(server, returns)
    for a, b in zip(before, server.model.adaptors[1].arrays()):
        np.testing.assert_array_equal(a, b)


def test_aggregate_order_independent():
    rng = np.random.default_rng(4)
    server, returns = server_and_returns(rng, rng.dirichlet(np.ones(2), size=4), [1, 2, 3, 4])
    other = ServerState(server.model.copy(), server.method)
    aggregate(server, returns)
    aggregate(other, returns[::-1])
    for a, b in zip(server.model.base_arrays(), other.model.base_arrays()):
        np.testing.assert_array_equal(a, b)


def test_aggregate_empty_is_error():
    server, _ = server_and_returns(np.random.default_rng(5), [[1, 0]], [1])
    with pytest.raises(ProtocolError):
        aggregate(server, [])


# -- optimal routing -----------------------------------------------------------

def test_optimal_router_diagonal():
    task = gen_linear_task(K=10, C=2, d_x=3, d_y=2)
    pi = optimal_router_override(task, MethodSpec("floral_opt_router"))
    assert [k for k in range(10) if pi[k, 0] == 1] == [0, 2, 4, 6, 8]


def test_optimal_router_single_cluster():
    task = gen_linear_task(K=3, C=1, d_x=3, d_y=2)
    pi = optimal_router_override(task, MethodSpec("floral_opt_router", C=1))
    np.testing.assert_array_equal(pi, np.ones((3, 1)))


def test_optimal_router_needs_router():
    task = gen_linear_task(K=4, C=2, d_x=3, d_y=2)
    with pytest.raises(ConfigError):
        optimal_router_override(task, MethodSpec("fedavg"))
    with pytest.raises(ConfigError):
        optimal_router_override(task, MethodSpec("floral_opt_router", C=3))


def test_frozen_routers_constant(small_task):
    reps = run_experiment(small_task, MethodSpec("floral_opt_router"), rounds=5)
    for r in reps:
        np.testing.assert_array_equal(r.routers, small_task.pi_star)
        assert r.router_accuracy == 1.0


# -- whole runs ----------------------------------------------------------------

def test_zero_rounds(small_task):
    run = FederatedRun(small_task, MethodSpec("floral"), TrainConfig(rounds=0))
    init = [a.copy() for a in run.server.model.base_arrays()]
    assert run.run() == []
    assert run.round == 0
    for a, b in zip(init, run.server.model.base_arrays()):
        np.testing.assert_array_equal(a, b)


def test_report_shape(small_task):
    reps = run_experiment(small_task, MethodSpec("floral"),
                          TrainConfig(cohort_fraction=0.5), rounds=3)
    assert [r.round for r in reps] == [1, 2, 3]
    for r in reps:
        assert len(r.clients) == 2 == len(r.train_losses)
        assert len(r.client_test_losses) == 4 and len(r.tv_per_cluster) == 2


def test_floral_without_adaptors_is_fedavg(small_task):
    train = TrainConfig(local_steps=3)
    a = run_experiment(small_task, MethodSpec("floral", C=1, lora=False, bias_adaptors=False),
                       train, seed=4, rounds=20)
    b = run_experiment(small_task, MethodSpec("fedavg"), train, seed=4, rounds=20)
    assert [r.test_loss for r in a] == [r.test_loss for r in b]
    assert [r.train_loss for r in a] == [r.train_loss for r in b]


def test_floral_beats_shared_map_floor():
    task = gen_linear_task(K=10, C=2, seed=0)
    reps = run_experiment(task, MethodSpec("floral"), rounds=300)
    assert reps[-1].test_loss < pooled_lstsq_floor(task)


def test_ensemble_optimal_dominates_fedavg():
    task = gen_linear_task(K=6, C=2, d_x=6, d_y=4, seed=2)
    train = TrainConfig(rounds=200)
    ens = run_experiment(task, MethodSpec("ensemble_opt_router"), train)
    fed = run_experiment(task, MethodSpec("fedavg"), train)
    assert ens[-1].test_loss < fed[-1].test_loss


def test_local_adaptor_keeps_adaptors_on_clients(small_task):
    run = FederatedRun(small_task, MethodSpec("local_adaptor"))
    assert run.server.model.C == 1 and all(la is None for la in run.server.model.adaptors[0].layers)
    assert not run.server.communicates_adaptors
    run.run(3)
    locals_ = [c.local_adaptor.arrays()[0] for c in run.clients]
    assert not np.array_equal(locals_[0], locals_[1])


def test_determinism_across_workers(small_task):
    train = TrainConfig(cohort_fraction=0.75)
    a = run_experiment(small_task, MethodSpec("floral"), train, seed=9, rounds=10)
    b = run_experiment(small_task, MethodSpec("floral"),
                       TrainConfig(cohort_fraction=0.75, workers=3), seed=9, rounds=10)
    assert [report_key(r) for r in a] == [report_key(r) for r in b]


def test_minibatch_runs(small_task):
    reps = run_experiment(small_task, MethodSpec("floral"), TrainConfig(batch_size=8), rounds=3)
    assert np.isfinite(reps[-1].test_loss)


def test_centering_preserves_predictions(small_task):
    # full-rank adaptors so the centered residuals are exactly representable
    run = FederatedRun(small_task, MethodSpec("floral", rank=3), TrainConfig(center_every=2))
    run.run(1)
    before = run.test_losses()
    center_server_adaptors(run.server.model, cluster_probs(run.routers(), run.N)[1])
    np.testing.assert_allclose(run.test_losses(), before, rtol=1e-9)
    run.run(3)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        MethodSpec("nope")
    with pytest.raises(ConfigError):
        TrainConfig(local_steps=0)
    with pytest.raises(ConfigError) as info:
        TrainConfig(cohort_fraction=1.5)
    assert info.value.field == "train.cohort_fraction"


def test_inverse_schedule():
    train = TrainConfig(eta=0.2, schedule="inverse", schedule_s=10)
    assert train.eta_at(0) == 0.2 and train.eta_at(10) == pytest.approx(0.1)
