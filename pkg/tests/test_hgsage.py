import numpy as np
import pytest

from hudn import gradengine as ge
from hudn import hgsage
from hudn.hetgraph import build_graph, db_to_linear, permute
from hudn.radiomap import RadioMap
from hudn.scenario import Event, sample_event


def small_graph(d1, seed=0, K=30):
    sc, rm = d1
    return build_graph(rm, sample_event(sc, K, seed), p_max=sc.p_max), sc


def test_init_shapes_and_determinism():
    a = hgsage.init_params((22, 30), seed=3)
    b = hgsage.init_params((22, 30), seed=3)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert a["layer1.ue.W1"].shape == (52, 64)
    assert a["layer1.ue.W2"].shape == (44, 64)
    assert a["layer2.bs.W2"].shape == (256, 64)
    assert hgsage.feature_dims(a) == (22, 30)
    with pytest.raises(ValueError):
        hgsage.init_params((22, 30), hidden=7)


def test_output_constraints(d1):
    g, sc = small_graph(d1)
    params = hgsage.init_params((sc.n_sites, 30), seed=0)
    out = hgsage.forward(g, params)
    assert out.x_soft.shape == (30, sc.n_sites)
    assert np.allclose(out.x_soft.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out.x_soft[~g.edges] == 0.0)
    assert np.all(out.p > 0) and np.all(out.p <= sc.p_max)
    hard = hgsage.harden(out.x_soft)
    assert np.all(hard.sum(axis=1) == 1.0)


def test_power_bound_random_params(d1):
    g, sc = small_graph(d1, K=30)
    batch = hgsage.GraphBatch.from_graphs([g], sc.p_max)
    rng = np.random.default_rng(0)
    base = hgsage.init_params((sc.n_sites, 30), seed=0)
    for trial in range(1000):
        theta = hgsage.leaves(base, requires_grad=False)
        theta["pc.w"] = ge.Tensor(rng.normal(scale=10.0 ** rng.uniform(-2, 3), size=base["pc.w"].shape))
        theta["pc.b"] = ge.Tensor(rng.normal(scale=100.0, size=1))
        _, p, _ = hgsage.forward_batch(batch, theta)
        assert np.all(p.value > 0) and np.all(p.value <= sc.p_max)


def test_missing_pmax(d1):
    sc, rm = d1
    g = build_graph(rm, sample_event(sc, 30, 0))
    with pytest.raises(ValueError):
        hgsage.forward(g, hgsage.init_params((sc.n_sites, 30)))
    with pytest.raises(ValueError):
        hgsage.forward(g, hgsage.init_params((sc.n_sites, 30)), T=0.0, p_max=sc.p_max)


def test_single_pair_graph_uses_first_order_only():
    rm = RadioMap(np.array([[1e-6]]), "0" * 64)
    g = build_graph(rm, Event((0,)), 1e-9, p_max=[1.0])
    assert all(a.sum() == 0 for a in g.aggregators()[1::2])
    params = hgsage.init_params((1, 1), seed=0)
    # weights acting on the empty second-order aggregate cannot matter
    other = dict(params)
    for k in ("layer1.ue.W2", "layer1.bs.W2"):
        w = other[k].copy()
        w[w.shape[0] // 2:] += 5.0
        other[k] = w
    a, b = hgsage.forward(g, params), hgsage.forward(g, other)
    assert np.array_equal(a.p, b.p)
    assert np.array_equal(a.x_soft, b.x_soft) and a.x_soft[0, 0] == 1.0


def test_layer_matches_manual(d1):
    g, sc = small_graph(d1)
    params = hgsage.init_params((sc.n_sites, 30), seed=1)
    a1u, a2u, a1b, a2b = g.aggregators()
    hu, hb = g.ue_features, g.bs_features
    relu = lambda v: np.maximum(v, 0.0)
    o = relu(np.hstack([hu, a1u @ hb]) @ params["layer1.ue.W1"] + params["layer1.ue.b1"])
    s = relu(np.hstack([hu, a2u @ hu]) @ params["layer1.ue.W2"] + params["layer1.ue.b2"])
    cat = np.hstack([o, s])
    n = np.linalg.norm(cat, axis=1, keepdims=True)
    expect = np.where(n > 0, cat / np.where(n > 0, n, 1.0), 0.0)
    w = {k[len("layer1."):]: ge.Tensor(v) for k, v in params.items() if k.startswith("layer1.")}
    got_u, _ = hgsage.hgsage_layer(ge.Tensor(hu), ge.Tensor(hb), g.aggregators(), w)
    assert np.allclose(got_u.value, expect, atol=1e-14)


def test_permutation_equivariance(d1, rng):
    g, sc = small_graph(d1, seed=2)
    params = hgsage.init_params((sc.n_sites, 30), seed=5)
    up, bp = rng.permutation(30), rng.permutation(sc.n_sites)
    a = hgsage.forward(g, params)
    b = hgsage.forward(permute(g, up, bp), params)
    assert np.abs(b.x_soft - a.x_soft[np.ix_(up, bp)]).max() < 1e-9
    assert np.abs(b.p - a.p[bp]).max() < 1e-9


def test_batched_equals_single(d1):
    sc, rm = d1
    graphs = [build_graph(rm, sample_event(sc, 30, s), p_max=sc.p_max) for s in range(3)]
    params = hgsage.init_params((sc.n_sites, 30), seed=0)
    batch = hgsage.forward(graphs, params)
    for k, g in enumerate(graphs):
        one = hgsage.forward(g, params)
        assert np.allclose(batch.x_soft[k], one.x_soft, atol=1e-13)
        assert np.allclose(batch.p[k], one.p, rtol=1e-13)
    with pytest.raises(ValueError):
        hgsage.GraphBatch.from_graphs([graphs[0], build_graph(rm, sample_event(sc, 5, 0))], sc.p_max)
