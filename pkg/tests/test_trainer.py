import csv
import math

import numpy as np
import pytest

from hudn import gradengine as ge
from hudn import trainer as tr
from hudn.objective import check_feasible, sum_rate
from hudn.scenario import Event, ScenarioError, sample_event

SMALL = dict(K_a=4, hidden=16, head_hidden=8, batch_size=4, window=5)


def cfg(**kw):
    return tr.TrainConfig(**{**SMALL, **kw})


def test_rate_memory_window():
    m = tr.RateMemory()
    assert m.window_mean(3) == 0.0
    m.extend([1, 2])
    assert m.window_mean(3) == 1.5
    m.extend([3, 4])
    assert m.window_mean(3) == 3.0


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(window=0), dict(decay=0.0), dict(decay=1.5),
                                dict(lr=-1.0), dict(convergence_bound=0.0), dict(w_e=-1.0),
                                dict(temperature=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        cfg(**kw).validate()


def test_srl_defaults():
    c = tr.srl_config()
    assert (c.w_s, c.w_r, c.w_e, c.steps, c.batch_size) == (1.0, 1.0, 1e-2, 5000, 1)
    assert tr.TrainConfig().w_s == 100.0 and tr.TrainConfig().batch_size == 64


def test_zero_lr_keeps_params(d0):
    sc, rm = d0
    c = cfg(lr=0.0, steps=6)
    params, rows = tr.grl_train(rm, c, sc.p_max)
    from hudn.hgsage import init_params

    init = init_params((sc.n_sites, 4), tr._split_seeds(c.seed, 2)[0], 16, 8)
    assert all(np.array_equal(params[k], init[k]) for k in init)
    assert [r["step"] for r in rows] == list(range(1, 7))


def test_schedule_invariants(d0):
    sc, rm = d0
    _, rows = tr.grl_train(rm, cfg(steps=25, lr=1e-3), sc.p_max)
    lr = [r["lr"] for r in rows]
    rb = [r["r_b"] for r in rows]
    assert all(b <= a for a, b in zip(lr, lr[1:]))
    assert all(b >= a for a, b in zip(rb, rb[1:]))
    prev = 0.0
    for r in rows:
        assert r["updated"] == int(r["r_n"] > prev)
        prev = max(prev, r["r_n"])


def test_update_every_step_when_not_gated(d0):
    sc, rm = d0
    _, rows = tr.grl_train(rm, cfg(steps=8, skip_update_on_decay=False), sc.p_max)
    assert all(r["updated"] == 1 for r in rows)


def test_grl_bit_reproducible(d0, tmp_path):
    sc, rm = d0
    c = cfg(steps=10, lr=1e-3, event_pool=16)
    a, ra = tr.grl_train(rm, c, sc.p_max)
    b, rb = tr.grl_train(rm, c, sc.p_max)
    assert ra == rb
    ge.save_checkpoint(tmp_path / "a", a)
    ge.save_checkpoint(tmp_path / "b", b)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    c2, _ = tr.grl_train(rm, tr.with_overrides(c, seed=1), sc.p_max)
    assert not np.array_equal(a["ua.v"], c2["ua.v"])


def test_fixed_event_set(d0):
    sc, rm = d0
    ev = sample_event(sc, 4, 0)
    _, rows = tr.grl_train(rm, cfg(steps=2), sc.p_max, events=[ev])
    assert len(rows) == 2
    with pytest.raises(ScenarioError):
        tr.grl_train(rm, cfg(steps=2), sc.p_max, events=[sample_event(sc, 3, 0)])
    with pytest.raises(ScenarioError):
        tr.grl_train(rm, cfg(steps=1, K_a=sc.n_grid + 1), sc.p_max)


def test_non_finite_aborts_with_checkpoint(d0, tmp_path):
    sc, rm = d0
    params, _ = tr.grl_train(rm, cfg(steps=1), sc.p_max)
    params["layer1.ue.W1"][0, 0] = np.nan
    with pytest.raises(tr.TrainingAborted) as info:
        tr.grl_train(rm, cfg(steps=3, checkpoint_dir=str(tmp_path)), sc.p_max, params=params)
    assert info.value.checkpoint and ge.load_checkpoint(info.value.checkpoint)[1] == {"step": 1}


def test_periodic_checkpoints(d0, tmp_path):
    sc, rm = d0
    tr.grl_train(rm, cfg(steps=4, checkpoint_every=2, checkpoint_dir=str(tmp_path)), sc.p_max)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["grl_step2.ckpt", "grl_step4.ckpt"]


@pytest.fixture(scope="module")
def grl_params(d0):
    sc, rm = d0
    params, _ = tr.grl_train(rm, cfg(steps=20, lr=1e-3), sc.p_max)
    return params


def _rate(params, rm, ev, sc):
    a = tr.predict_event(params, rm, ev, sc.p_max, cfg())
    return sum_rate(a.x, a.p, rm.rows(ev.indices))


def test_srl_infinite_bound_stops_after_first_window(d0, grl_params):
    sc, rm = d0
    ev = sample_event(sc, 4, 1)
    _, rows = tr.srl_train(rm, ev, grl_params, tr.srl_config(**SMALL, convergence_bound=math.inf), sc.p_max)
    assert len(rows) == SMALL["window"]


def test_srl_zero_lr_returns_grl(d0, grl_params):
    sc, rm = d0
    ev = sample_event(sc, 4, 2)
    params, rows = tr.srl_train(rm, ev, grl_params, tr.srl_config(**SMALL, lr=0.0, steps=12), sc.p_max)
    assert all(np.array_equal(params[k], grl_params[k]) for k in params)
    assert _rate(params, rm, ev, sc) == _rate(grl_params, rm, ev, sc)


def test_srl_never_degrades(d0, grl_params):
    sc, rm = d0
    for seed in range(4):
        ev = sample_event(sc, 4, 10 + seed)
        tuned, _ = tr.srl_train(rm, ev, grl_params, tr.srl_config(**SMALL, steps=60), sc.p_max)
        assert _rate(tuned, rm, ev, sc) >= _rate(grl_params, rm, ev, sc)


def test_srl_input_errors(d0, grl_params):
    sc, rm = d0
    with pytest.raises(ValueError):
        tr.srl_train(rm, sample_event(sc, 3, 0), grl_params, tr.srl_config(**SMALL), sc.p_max)
    with pytest.raises(IndexError):
        tr.srl_train(rm, Event((0, 1, 2, sc.n_grid)), grl_params, tr.srl_config(**SMALL), sc.p_max)


def test_evaluate_deterministic_and_feasible(d0, grl_params):
    sc, rm = d0
    events = [sample_event(sc, 4, s) for s in range(5)]
    a = tr.evaluate(grl_params, rm, events, sc.p_max, cfg())
    b = tr.evaluate(grl_params, rm, events, sc.p_max, cfg())
    for ra, rb, ev in zip(a, b, events):
        assert np.array_equal(ra.rates, rb.rates) and np.array_equal(ra.power, rb.power)
        x = np.eye(sc.n_sites)[ra.serving]
        check_feasible(x, ra.power, sc.p_max)
        assert ra.wall_clock > 0


def test_log_csv(tmp_path, d0):
    sc, rm = d0
    _, rows = tr.grl_train(rm, cfg(steps=3), sc.p_max)
    tr.write_log_csv(rows, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["step", "r_n", "r_b", "lr", "L_s", "L_total", "updated"]
    assert float(got[1][1]) == rows[0]["r_n"] and len(got) == 4
