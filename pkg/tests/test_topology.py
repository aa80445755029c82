import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_network, random_sparse
from sparsetrain.errors import ProtocolError
from sparsetrain.nn import NetworkConfig, SparseNetwork
from sparsetrain.sparse import SparseWeights
from sparsetrain.topology import (
    EvolutionConfig,
    average_models,
    er_init,
    er_probability,
    importance_prune,
    neuron_importance,
    set_evolve,
)


def test_er_probability_cap_gives_dense_layer(rng):
    w = er_init(4, 5, 100.0, "normal", rng)
    assert w.nnz == 20 and er_probability(4, 5, 100.0) == 1.0


def test_er_784_1000_within_4_sigma():
    p = er_probability(784, 1000, 20)
    n = 784 * 1000
    sigma = np.sqrt(n * p * (1 - p))
    w = er_init(784, 1000, 20, "normal", np.random.default_rng(0))
    assert abs(w.nnz - n * p) < 4 * sigma
    assert n * p == pytest.approx(35680)


@pytest.mark.parametrize("scheme", ["normal", "xavier", "he_uniform"])
def test_er_init_schemes(rng, scheme):
    w = er_init(60, 40, 5, scheme, rng)
    w.validate()
    assert np.all(w.values != 0)
    if scheme == "xavier":
        assert np.abs(w.values).max() <= np.sqrt(6 / 100)
    if scheme == "he_uniform":
        assert np.abs(w.values).max() <= np.sqrt(6 / 60)


def test_er_large_layer_uses_subset_sampler():
    # above the dense-draw limit the count is binomial and positions uniform
    w = er_init(10000, 6000, 1.0, "normal", np.random.default_rng(1))
    w.validate()
    expected = (16000 / 6e7) * 6e7
    assert abs(w.nnz - expected) < 5 * np.sqrt(expected)


# -- SET ---------------------------------------------------------------------


def test_set_floor_to_zero_is_identity(rng):
    w = SparseWeights.from_coo(3, 3, [0], [0], [1.0])
    assert set_evolve(w, 0.3, "normal", rng) is w


def test_set_removes_weakest_per_sign(rng):
    w = SparseWeights.from_coo(3, 3, [0, 0, 1, 2], [0, 1, 1, 2], [4.0, 0.1, -0.05, -7.0])
    out = set_evolve(w, 0.5, "normal", rng)
    assert out.nnz == 4
    kept = out.positions() & w.positions()
    assert kept == {(0, 0), (2, 2)}
    assert out.positions() - w.positions() and not (out.positions() - kept) & w.positions()


def test_set_randomized_conservation():
    rng = np.random.default_rng(5)
    keys = np.sort(rng.choice(900, 200, replace=False))
    w = SparseWeights.from_keys(30, 30, keys, rng.standard_normal(200))
    for _ in range(100):
        before = w.positions()
        out = set_evolve(w, 0.3, "normal", rng)
        out.validate()
        assert out.nnz == 200
        removed = before - out.positions()
        assert not (out.positions() - before) & before
        assert len(removed) == len(out.positions() - before)
        w = out


def test_set_dense_layer_no_free_positions(rng):
    w = SparseWeights.from_dense(rng.standard_normal((3, 3)) + 5.0)
    assert set_evolve(w, 0.3, "normal", rng) is w


def test_set_rejects_bad_zeta(rng):
    with pytest.raises(ValueError):
        set_evolve(random_sparse(rng, 4, 4, 0.5), 1.0, "normal", rng)


# -- importance --------------------------------------------------------------


def test_neuron_importance():
    w = SparseWeights.from_coo(3, 2, [0, 1, 2], [0, 0, 0], [0.5, -0.3, 0.2])
    imp = neuron_importance(w)
    assert imp[0] == pytest.approx(1.0) and imp[1] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_neuron_importance_invariances(seed):
    rng = np.random.default_rng(seed)
    w = random_sparse(rng, 9, 7, 0.4)
    dense = np.abs(w.to_dense()).sum(axis=0)
    assert np.array_equal(neuron_importance(w), dense) or np.allclose(neuron_importance(w), dense, rtol=1e-15)
    flips = np.where(rng.random(w.nnz) < 0.5, -1.0, 1.0)
    assert np.array_equal(neuron_importance(w.with_values(w.values * flips)), neuron_importance(w))
    perm = rng.permutation(w.nnz)
    shuffled = SparseWeights.from_coo(9, 7, w.row_of[perm], w.col_idx[perm], w.values[perm])
    assert np.array_equal(neuron_importance(shuffled), neuron_importance(w))


def _importance_fixture(importances, fan_in=2):
    """Network 2-5-3-2 whose hidden-layer-2 neuron j has importance ``importances[j]``."""
    n = len(importances)
    w1 = SparseWeights.from_dense(np.tile(np.asarray(importances, float) / fan_in, (fan_in, 1)))
    w2 = SparseWeights.from_dense(np.ones((n, 3)))
    w3 = SparseWeights.from_dense(np.ones((3, 2)))
    cfg = NetworkConfig([fan_in, n, 3, 2], dtype="float64")
    return SparseNetwork([w1, w2, w3], [np.zeros(n), np.zeros(3), np.zeros(2)], cfg)


def test_importance_prune_zero_percentile_noop():
    net = _importance_fixture([1, 2, 3, 4, 100])
    before = net.n_params
    report = importance_prune(net, 0.0)
    assert net.n_params == before and report.total_removed == 0


def test_importance_prune_25th_percentile():
    net = _importance_fixture([1, 2, 3, 4, 100])
    version = net.topology_version
    report = importance_prune(net, 25.0)
    assert 1 < report.thresholds[0] < 3
    assert report.pruned[0].tolist() == [0]
    assert 0 not in net.layers[0].col_idx and 0 not in net.layers[1].row_of
    # two incoming, three outgoing connections of neuron 0
    assert report.removed_connections[:2] == [2, 3]
    assert net.topology_version == version + 1


def test_importance_prune_without_outgoing():
    net = _importance_fixture([1, 2, 3, 4, 100])
    importance_prune(net, 25.0, prune_outgoing=False)
    assert 0 in net.layers[1].row_of


def test_importance_prune_idempotent_on_fixture():
    net = _importance_fixture([1, 5, 5, 5, 5])
    importance_prune(net, 10.0)
    params = net.n_params
    report = importance_prune(net, 10.0)
    assert net.n_params == params and report.total_removed == 0


def test_importance_prune_never_touches_io_neurons(rng):
    net = random_network(rng, [12, 10, 10, 3], 0.6)
    importance_prune(net, 30.0)
    assert set(np.unique(net.layers[-1].col_idx)) <= set(range(3))
    assert net.layers[-1].cols == 3 and net.layers[0].rows == 12


def test_importance_prune_monotone(rng):
    for _ in range(20):
        net = random_network(rng, [10, 12, 8, 3], float(rng.uniform(0.2, 0.9)))
        before = net.n_params
        report = importance_prune(net, float(rng.uniform(1, 50)))
        if any(len(p) for p in report.pruned):
            assert net.n_params < before
        else:
            assert net.n_params == before


def test_importance_prune_equal_importances_noop():
    net = _importance_fixture([1, 1, 1, 1, 1])
    # nothing is strictly below the percentile of a constant distribution
    assert importance_prune(net, 50.0).total_removed == 0


def test_importance_prune_refuses_to_empty_layer(monkeypatch, caplog):
    from sparsetrain import topology

    monkeypatch.setattr(topology, "percentile_threshold", lambda values, p: float("inf"))
    net = _importance_fixture([1, 2, 3, 4, 5])
    before = net.n_params
    report = importance_prune(net, 50.0)
    assert report.skipped == [2, 3] and net.n_params == before
    assert "skipped" in caplog.text


def test_importance_prune_exclude_isolated():
    net = _importance_fixture([1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
    # disconnect half of the neurons: with them counted the threshold would be 0
    keep = ~np.isin(net.layers[0].col_idx, [0, 1, 2, 3, 4])
    w = net.layers[0]
    net.layers[0] = SparseWeights.from_keys(w.rows, w.cols, w.keys[keep], w.values[keep])
    report = importance_prune(net, 25.0, exclude_isolated=False)
    assert report.thresholds[0] == 0.0
    report = importance_prune(net, 25.0)
    assert report.thresholds[0] > 6 and 5 in report.pruned[0]


def test_evolution_config_schedule():
    evo = EvolutionConfig(importance_enabled=True, importance_start_epoch=10, importance_period=5)
    assert [e for e in range(30) if evo.importance_due(e)] == [10, 15, 20, 25]
    with pytest.raises(ValueError):
        EvolutionConfig(zeta=0)
    with pytest.raises(ValueError):
        EvolutionConfig(importance_period=0)


# -- averaging ---------------------------------------------------------------


def test_average_single_model_identity(rng):
    net = random_network(rng, [6, 5, 3], 0.5)
    out = average_models([net], net.nnz)
    for a, b in zip(out.layers, net.layers):
        assert a.same_structure(b) and np.array_equal(a.values, b.values)


def test_average_disjoint_single_entries():
    cfg = NetworkConfig([2, 2, 2], dtype="float64")

    def make(r, v):
        w = SparseWeights.from_coo(2, 2, [r], [0], [v])
        return SparseNetwork([w, w.copy()], [np.zeros(2), np.zeros(2)], cfg)

    avg = average_models([make(0, 4.0), make(1, 2.0)], [2, 2])
    assert sorted(avg.layers[0].values.tolist()) == [1.0, 2.0]
    pruned = average_models([make(0, 4.0), make(1, 2.0)], [1, 1])
    assert pruned.layers[0].values.tolist() == [2.0]


def test_average_k4_union_and_target(rng):
    base = random_network(rng, [12, 10, 4], 0.4)
    models = []
    for _ in range(4):
        m = base.copy()
        m.set_layers([set_evolve(w, 0.3, "normal", rng) for w in m.layers])
        models.append(m)
    target = base.nnz
    avg = average_models(models, target)
    assert avg.nnz == target
    union = [len(set().union(*(m.layers[i].positions() for m in models))) for i in range(2)]
    assert all(u >= max(m.nnz[i] for m in models) for i, u in enumerate(union))


def test_average_sparsity_target(rng):
    net = random_network(rng, [10, 10, 3], 0.5)
    avg = average_models([net, net.copy()], 0.8)
    assert avg.nnz[0] == min(20, net.nnz[0])


def test_average_architecture_mismatch(rng):
    a = random_network(rng, [4, 3, 2], 0.5)
    b = random_network(rng, [4, 5, 2], 0.5)
    with pytest.raises(ProtocolError):
        average_models([a, b], a.nnz)
    with pytest.raises(ProtocolError):
        average_models([], [1])
