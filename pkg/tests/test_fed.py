import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import spoqfl.fed as fed_mod
from spoqfl.fed import (
    ClientState,
    FedConfig,
    Federation,
    aggregate,
    local_train,
    partition,
    sporadic_variable,
)
from spoqfl.noise import NoiseModel
from spoqfl.qnn import GradResult, QnnModel, param_shift_grad


def toy_problem(n=24, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 2))
    y = (x[:, 0] > x[:, 1]).astype(int)
    model = QnnModel.initialize(2, 1, 2, np.random.default_rng(seed + 1))
    return model, x, y


def make_federation(cfg, noises, seed=0, shards=None):
    model, x, y = toy_problem()
    if shards is None:
        shards = partition(y, "iid", cfg.clients, np.random.default_rng(seed))
    clients = [ClientState(k, s, noises[k % len(noises)]) for k, s in enumerate(shards)]
    return Federation(model, clients, cfg, x, y, x, y, seed=seed)


# ---------------------------------------------------------------- gating


def test_sporadic_examples():
    assert sporadic_variable(0.0, 7.0) == 1.0
    assert sporadic_variable(3.0, 0.0) == 1.0
    assert sporadic_variable(0.5, 2.0) == pytest.approx(0.367879, abs=1e-6)
    assert sporadic_variable(0.5, 2.0) == pytest.approx(math.exp(-1.0), abs=1e-15)
    with pytest.raises(ValueError):
        sporadic_variable(-0.1, 1.0)
    with pytest.raises(ValueError):
        sporadic_variable(0.1, -1.0)


@settings(max_examples=60, deadline=None)
@given(xi=st.floats(1e-3, 10), g1=st.floats(0, 5), dg=st.floats(1e-2, 5))
def test_gating_strictly_decreasing_in_gamma(xi, g1, dg):
    assert sporadic_variable(xi, g1 + dg) < sporadic_variable(xi, g1)


@settings(max_examples=60, deadline=None)
@given(g=st.floats(1e-2, 10), xi=st.floats(0, 5), dxi=st.floats(1e-2, 5))
def test_gating_strictly_decreasing_in_xi(g, xi, dxi):
    assert sporadic_variable(xi + dxi, g) < sporadic_variable(xi, g)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0, 1), t1=st.floats(0, 1.5), t2=st.floats(0, 1.5))
def test_skip_decision_monotone_in_tau(x, t1, t2):
    lo, hi = sorted((t1, t2))
    # skipping at a lower threshold implies skipping at a higher one
    assert not (x < lo) or (x < hi)


# ---------------------------------------------------------------- local training


def client_for(noise, shard=None):
    _, x, y = toy_problem()
    return ClientState(0, np.arange(len(y)) if shard is None else shard, noise)


def test_gamma_zero_matches_vanilla():
    model, x, y = toy_problem()
    nm = NoiseModel(0.2)
    base = dict(epochs=3, clients=1, lr=0.3, batch_size=8)
    a = local_train(client_for(nm), model.params, FedConfig(mode="vanilla_qfl", **base), model, x, y, 5, 2)
    b = local_train(client_for(nm), model.params, FedConfig(mode="spoqfl", **base), model, x, y, 5, 2)
    assert np.array_equal(a.params, b.params)
    assert all(s.x == 1.0 and not s.skipped for s in b.stats)
    assert [s.xi for s in a.stats] == [s.xi for s in b.stats]


def test_tau_above_one_skips_every_epoch():
    model, x, y = toy_problem()
    cfg = FedConfig(epochs=4, clients=1, lr=0.3, gamma=1.0, tau=1.0 + 1e-9)
    res = local_train(client_for(NoiseModel(0.0)), model.params, cfg, model, x, y)
    assert np.array_equal(res.params, model.params)
    assert all(s.skipped for s in res.stats)


def test_noiseless_client_never_skips():
    model, x, y = toy_problem()
    cfg = FedConfig(epochs=3, clients=1, lr=0.3, gamma=50.0, tau=0.99)
    res = local_train(client_for(NoiseModel(0.0)), model.params, cfg, model, x, y)
    for s in res.stats:
        assert s.xi == 0.0 and s.x == 1.0 and not s.skipped


def test_update_is_scaled_gradient_step():
    model, x, y = toy_problem()
    nm = NoiseModel(0.3)
    cfg = FedConfig(epochs=1, clients=1, lr=0.4, gamma=3.0, tau=0.0, batch_size=0)
    res = local_train(client_for(nm), model.params, cfg, model, x, y)
    g = param_shift_grad(model, x, y, noise=nm).grad
    xval = res.stats[0].x
    assert 0 < xval < 1
    np.testing.assert_allclose(res.params, model.params - cfg.lr * xval * g, atol=1e-15)
    step = np.linalg.norm(res.params - model.params)
    assert step == pytest.approx(cfg.lr * xval * np.linalg.norm(g), rel=1e-12)


def test_empirical_estimator_in_shot_mode_runs():
    model, x, y = toy_problem()
    cfg = FedConfig(epochs=2, clients=1, lr=0.3, gamma=1.0, shots=32, estimator="empirical", xi_repeats=3)
    res = local_train(client_for(NoiseModel(0.1)), model.params, cfg, model, x, y)
    assert all(s.xi > 0 for s in res.stats)
    assert res.circuits > 0


def test_fed_config_validation():
    for bad in [dict(rounds=0), dict(clients=0), dict(epochs=-1), dict(lr=0.0), dict(gamma=-1),
                dict(mode="fedprox"), dict(estimator="magic"), dict(shots=0), dict(xi_metric="max")]:
        with pytest.raises(ValueError):
            FedConfig(**bad)
    vanilla = FedConfig(mode="vanilla_qfl", gamma=5.0, tau=0.5)
    assert (vanilla.effective_gamma, vanilla.effective_tau) == (0.0, 0.0)


# ---------------------------------------------------------------- aggregation


def test_aggregate_examples():
    np.testing.assert_array_equal(aggregate([np.array([1.0, 2.0])]), [1.0, 2.0])
    np.testing.assert_array_equal(aggregate([[1, 3], [3, 1]]), [2, 2])
    v = np.array([0.1, -0.7, 3.0])
    np.testing.assert_allclose(aggregate([v] * 5), v, atol=1e-15)
    with pytest.raises(ValueError):
        aggregate([])
    np.testing.assert_allclose(aggregate([[0.0], [3.0]], weights=[2, 1]), [1.0])


vectors = st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=6)


@settings(max_examples=50, deadline=None)
@given(updates=vectors, c=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_aggregate_linear_and_permutation_invariant(updates, c, seed):
    u = np.array(updates)
    np.testing.assert_allclose(aggregate(c * u), c * aggregate(u), atol=1e-9)
    perm = np.random.default_rng(seed).permutation(len(u))
    np.testing.assert_allclose(aggregate(u[perm]), aggregate(u), atol=1e-9)


# ---------------------------------------------------------------- rounds


def test_zero_epoch_round_keeps_global():
    cfg = FedConfig(rounds=1, epochs=0, clients=1)
    fed = make_federation(cfg, [NoiseModel(0.1)])
    before = fed.params.copy()
    rep = fed.run_round()
    assert np.array_equal(fed.params, before)
    assert rep.round == 0 and rep.skip_count == 0
    assert 0.0 <= rep.global_accuracy <= 1.0


def test_identical_clients_aggregate_to_either_update():
    model, x, y = toy_problem()
    shard = np.arange(len(y))
    cfg = FedConfig(rounds=1, epochs=2, clients=2, lr=0.3, batch_size=0)
    fed = make_federation(cfg, [NoiseModel(0.05)], shards=[shard, shard])
    rep = fed.run_round()
    a, b = (r.params for r in rep.clients)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(fed.params, a, atol=1e-15)


def test_round_report_invariants():
    cfg = FedConfig(rounds=3, epochs=2, clients=3, lr=0.3, gamma=20.0, tau=0.5)
    fed = make_federation(cfg, [NoiseModel(0.0), NoiseModel(0.3)])
    for rep in fed.run():
        assert 0 <= rep.skip_count <= cfg.clients * cfg.epochs
        assert 0.0 <= rep.global_accuracy <= 1.0
        assert 0.0 < rep.mean_x <= 1.0
        assert rep.circuit_evals > 0


def test_parallel_and_serial_rounds_agree():
    reports = []
    for workers in (1, 3):
        cfg = FedConfig(rounds=2, epochs=2, clients=3, lr=0.3, gamma=2.0, shots=16, workers=workers)
        fed = make_federation(cfg, [NoiseModel(0.1)])
        reports.append([r.global_loss for r in fed.run()] + list(fed.params))
    assert reports[0] == reports[1]


def _nan_for_marked(model, feats, labels, noise=None, shots=None, rng=None):
    res = param_shift_grad(model, feats, labels, noise=noise, shots=shots, rng=rng)
    if noise is not None and noise.epsilon == 0.25:
        return GradResult(res.grad * np.nan, res.loss, res.circuits)
    return res


def test_failing_client_is_excluded(monkeypatch):
    monkeypatch.setattr(fed_mod, "param_shift_grad", _nan_for_marked)
    cfg = FedConfig(rounds=1, epochs=1, clients=3, lr=0.3, batch_size=0, track_xi=False)
    fed = make_federation(cfg, [NoiseModel(0.0), NoiseModel(0.25), NoiseModel(0.0)])
    rep = fed.run_round()
    assert rep.failed == [1]
    ok = [r.params for r in rep.clients if not r.failed]
    np.testing.assert_allclose(fed.params, np.mean(ok, axis=0), atol=1e-15)


def test_all_clients_failing_keeps_previous_global(monkeypatch):
    monkeypatch.setattr(fed_mod, "param_shift_grad", _nan_for_marked)
    cfg = FedConfig(rounds=1, epochs=1, clients=2, lr=0.3, track_xi=False)
    fed = make_federation(cfg, [NoiseModel(0.25)])
    before = fed.params.copy()
    rep = fed.run_round()
    assert rep.failed == [0, 1]
    assert np.array_equal(fed.params, before)


# ---------------------------------------------------------------- partitioning


def assert_disjoint_cover(shards, n):
    joined = np.concatenate(shards)
    assert joined.size == n
    assert np.array_equal(np.sort(joined), np.arange(n))
    assert all(len(s) > 0 for s in shards)


def test_single_client_gets_everything():
    labels = np.repeat([0, 1, 2], 10)
    for scheme in ("iid", "dirichlet", "label_skew"):
        (only,) = partition(labels, scheme, 1, np.random.default_rng(0))
        assert np.array_equal(only, np.arange(30))


def test_iid_even_split():
    shards = partition(np.repeat([0, 1], 50), "iid", 2, np.random.default_rng(0))
    assert [len(s) for s in shards] == [50, 50]


def test_label_skew_gives_exactly_s_classes():
    labels = np.repeat(np.arange(4), 20)
    shards = partition(labels, "label_skew", 4, np.random.default_rng(1), classes_per_client=2)
    assert_disjoint_cover(shards, labels.size)
    for s in shards:
        assert len(np.unique(labels[s])) == 2


def test_huge_alpha_dirichlet_is_balanced():
    labels = np.repeat([0, 1], 500)
    for seed in range(20):
        shards = partition(labels, "dirichlet", 2, np.random.default_rng(seed), alpha=1e6)
        for s in shards:
            assert abs(np.mean(labels[s] == 1) - 0.5) <= 0.05


def test_partition_errors():
    labels = np.repeat([0, 1, 2], 4)
    with pytest.raises(ValueError):
        partition(labels, "iid", 13, np.random.default_rng(0))
    with pytest.raises(ValueError):
        partition(labels, "label_skew", 2, np.random.default_rng(0), classes_per_client=1)
    with pytest.raises(ValueError):
        partition(labels, "dirichlet", 2, np.random.default_rng(0), alpha=0)
    with pytest.raises(ValueError):
        partition(labels, "shuffle", 2, np.random.default_rng(0))
    # tiny alpha on a small set cannot give every one of many clients data
    with pytest.raises(ValueError, match="empty"):
        partition(labels, "dirichlet", 12, np.random.default_rng(0), alpha=1e-3)


@settings(max_examples=60, deadline=None)
@given(n_classes=st.integers(2, 5), per_class=st.integers(3, 30), clients=st.integers(1, 6),
       scheme=st.sampled_from(["iid", "dirichlet", "label_skew"]), seed=st.integers(0, 10_000))
def test_partition_is_disjoint_cover(n_classes, per_class, clients, scheme, seed):
    labels = np.random.default_rng(seed).permutation(np.repeat(np.arange(n_classes), per_class))
    try:
        shards = partition(labels, scheme, clients, np.random.default_rng(seed), alpha=1.0,
                           classes_per_client=min(2, n_classes))
    except ValueError as exc:
        # only the documented infeasibility outcomes are allowed
        assert "empty" in str(exc) or "cannot cover" in str(exc)
        return
    assert len(shards) == clients
    assert_disjoint_cover(shards, labels.size)
