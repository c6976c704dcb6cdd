import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hudn import gradengine as ge
from hudn.objective import (
    DEFAULT_NOISE,
    Allocation,
    InfeasibleAllocation,
    association_rates,
    check_feasible,
    effective_rate,
    entropy_loss,
    grl_loss,
    harden,
    loads,
    one_hot,
    rate_report,
    sinr,
    sinr_matrix,
    srl_loss,
    sum_rate,
    supervised_loss,
    two_path_rate,
    ue_rates,
    write_loads_csv,
    write_reports_csv,
)

B = 20e6


def loop_sum_rate(serving, p, g, B=B, s2=DEFAULT_NOISE):
    """Scalar re-derivation of the sum rate, one UE at a time."""
    K, J = g.shape
    total = 0.0
    for i in range(K):
        j = serving[i]
        interf = sum(p[n] * g[i][n] for n in range(J) if n != j)
        load = sum(1 for k in range(K) if serving[k] == j)
        total += B / load * math.log2(1.0 + p[j] * g[i][j] / (interf + s2))
    return total


@pytest.fixture
def tiny(rng):
    g = rng.uniform(1e-10, 1e-6, size=(4, 3))
    p = np.array([20.0, 0.05, 0.08])
    return g, p


def test_sinr_hand_value():
    g = np.array([1e-6, 2e-7])
    p = np.array([1.0, 0.5])
    assert sinr(0, 0, p, g, 1e-9) == pytest.approx(9.900990099009901, rel=1e-15)
    assert sinr_matrix(g[None], p, 1e-9)[0, 0] == pytest.approx(9.900990099009901, rel=1e-15)


def test_effective_rate_hand_value():
    g = np.array([[1e-6, 2e-7], [1e-6, 2e-7]])
    x = np.array([[1.0, 0.0], [1.0, 0.0]])
    r = effective_rate(0, 0, x, [1.0, 0.5], g, B, 1e-9)
    assert r == pytest.approx(34463872.70812574, rel=1e-14)
    assert ue_rates(x, [1.0, 0.5], g, B, 1e-9)[0] == pytest.approx(r, rel=1e-14)
    with pytest.raises(InfeasibleAllocation):
        effective_rate(0, 1, x, [1.0, 0.5], g, B, 1e-9)


def test_sum_rate_matches_enumeration(tiny):
    g, p = tiny
    for serving in itertools.product(range(3), repeat=4):
        x = one_hot(np.array(serving), 3)
        assert sum_rate(x, p, g) == pytest.approx(loop_sum_rate(serving, p, g), rel=1e-12)


def test_sinr_denominator_and_rates_nonnegative(tiny):
    g, p = tiny
    recv = g * p
    s = sinr_matrix(g, p, DEFAULT_NOISE)
    assert np.all(recv / s >= DEFAULT_NOISE * (1 - 1e-15))
    x = harden(np.random.default_rng(0).random((4, 3)))
    assert np.all(ue_rates(x, p, g) >= 0)


def test_single_link_monotone_in_own_power():
    g = np.array([[1e-7, 1e-9], [2e-9, 3e-7]])
    x = np.eye(2)
    rates = [sum_rate(x, [q, 1e-12], g) for q in np.geomspace(1e-6, 10, 30)]
    assert np.all(np.diff(rates) > 0)


def test_feasibility_checks():
    check_feasible(np.eye(2), [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(InfeasibleAllocation):
        check_feasible([[1.0, 1.0], [0.0, 1.0]], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(InfeasibleAllocation):
        check_feasible(np.eye(2), [1.0, 1.0 + 1e-12], [1.0, 1.0])
    with pytest.raises(InfeasibleAllocation):
        check_feasible(np.eye(2), [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(InfeasibleAllocation):
        sum_rate(np.eye(2) * 0.5, [1.0, 1.0], np.ones((2, 2)), p_max=[1.0, 1.0])
    check_feasible([[0.3, 0.7]], [1.0], [1.0], hard=False)
    with pytest.raises(InfeasibleAllocation):
        Allocation(np.array([[0.3, 0.6]]), np.array([1.0]), hard=False).check([1.0])


def test_harden_ties_lowest_index():
    assert np.array_equal(harden([[0.5, 0.5], [0.2, 0.8]]), [[1, 0], [0, 1]])
    assert np.array_equal(loads(harden([[0.5, 0.5], [0.2, 0.8]])), [1, 1])


def test_association_rates_counterfactual_load():
    g = np.array([[1e-6, 1e-7], [1e-6, 1e-7]])
    p = np.array([1.0, 1.0])
    x = np.array([[1.0, 0.0], [1.0, 0.0]])
    r = association_rates(g, p, x, B, 1e-9)
    se = np.log2(1 + sinr_matrix(g, p, 1e-9))
    assert r[0, 0] == pytest.approx(B * se[0, 0] / 2)
    assert r[0, 1] == pytest.approx(B * se[0, 1] / 1)


def test_two_path_value_is_hard_sum_rate(tiny, rng):
    g, p = tiny
    for _ in range(20):
        xs = ge.softmax_T(rng.normal(size=(4, 3)), 0.3).value
        assert two_path_rate(xs, p, g).value == sum_rate(harden(xs), p, g)


def test_two_path_batched(rng):
    g = rng.uniform(1e-10, 1e-6, size=(3, 4, 3))
    p = rng.uniform(0.01, 1.0, size=(3, 3))
    xs = ge.softmax_T(rng.normal(size=(3, 4, 3)), 0.5).value
    assert float(two_path_rate(xs, p, g)) == pytest.approx(float(sum_rate(harden(xs), p, g).sum()), rel=1e-14)


def test_power_path_gradient_matches_fd(tiny, rng):
    g, p = tiny
    xs = ge.softmax_T(rng.normal(size=(4, 3)), 0.3).value
    hard = harden(xs)
    pt = ge.Tensor(p, requires_grad=True)
    (gp,) = ge.backward(two_path_rate(xs, pt, g, hard=hard), [pt])
    for j in range(3):
        h = 1e-6 * p[j]
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        fd = (sum_rate(hard, up, g) - sum_rate(hard, dn, g)) / (2 * h)
        assert gp[j] == pytest.approx(fd, rel=1e-6)


def test_association_path_is_rate_weighted_softmax_jacobian():
    # one UE, two BSs: d R / d z = J_softmax^T rates
    g = np.array([[3e-7, 1e-7]])
    p = np.array([1.0, 0.5])
    z = ge.Tensor([0.4, -0.2], requires_grad=True)
    T = 0.5
    x = ge.reshape(ge.softmax_T(z, T), (1, 2))
    (gz,) = ge.backward(two_path_rate(x, p, g, B, 1e-9), [z])
    xv = x.value[0]
    rates = association_rates(g, p, harden(x.value), B, 1e-9)[0]
    jac = (np.diag(xv) - np.outer(xv, xv)) / T
    assert np.allclose(gz, jac.T @ rates, rtol=1e-12)


def test_supervised_loss():
    x = np.array([[0.9, 0.1], [0.2, 0.8]])
    y = np.eye(2)
    assert float(supervised_loss(x, y)) == pytest.approx(-math.log(0.9) - math.log(0.8))
    assert float(supervised_loss([[1.0, 0.0]], [[0.0, 1.0]])) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        supervised_loss(x, np.eye(3))


def test_entropy_values():
    assert float(entropy_loss([[1.0, 0.0]])) == pytest.approx(0.5822031088882179, rel=1e-14)
    assert float(entropy_loss(np.zeros((3, 4)))) == pytest.approx(4.1588830833596715, rel=1e-14)
    assert float(entropy_loss([[80.0, 0.0]])) < 1e-30
    mask = np.array([[True, False, True]])
    assert float(entropy_loss([[0.0, 5.0, 0.0]], mask)) == pytest.approx(math.log(2))


def test_loss_composition(tiny, rng):
    g, p = tiny
    z = rng.normal(size=(4, 3))
    xs = ge.softmax_T(z, 0.2).value
    y = harden(rng.random((4, 3)))
    Ls = float(supervised_loss(xs, y))
    R = sum_rate(harden(xs), p, g) / B
    assert float(grl_loss(xs, p, y, g, w_s=2.0, w_r=0.0)) == pytest.approx(2 * Ls)
    assert float(grl_loss(xs, p, y, g, w_s=0.0, w_r=3.0)) == pytest.approx(-3 * R)
    assert float(srl_loss(xs, p, z, y, g, w_e=0.0)) == float(grl_loss(xs, p, y, g, w_s=1.0))
    assert float(srl_loss(xs, p, z, y, g, 0.0, 0.0, 0.0)) == 0.0
    with pytest.raises(ValueError):
        grl_loss(xs, p, y, g, w_s=-1.0)


def _fixture_terms():
    gains = np.array([[4e-7, 1e-8, 3e-9], [2e-9, 5e-7, 1e-8], [1e-8, 2e-8, 6e-7], [3e-7, 2e-7, 1e-9]])
    p = np.array([10.0, 0.1, 0.05])
    z = np.array([[1.0, -0.5, 0.2], [0.1, 0.9, -1.0], [-0.3, 0.0, 1.2], [0.6, 0.5, -0.4]])
    y = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 0]])
    return gains, p, z, y


def _oracle_terms(gains, p, z, y, T):
    """Supervised, rate (bit/s/Hz) and entropy terms rebuilt with scalar math."""
    xs, ent, Ls = [], 0.0, 0.0
    for row, yrow in zip(z, y):
        e = [math.exp(v / T) for v in row]
        s = sum(e)
        xs.append([v / s for v in e])
        Ls -= sum(yy * math.log(v / s) for yy, v in zip(yrow, e))
        e1 = [math.exp(v) for v in row]
        s1 = sum(e1)
        ent -= sum(v / s1 * math.log(v / s1) for v in e1)
    serving = [max(range(3), key=lambda j: r[j]) for r in xs]
    return np.array(xs), Ls, loop_sum_rate(serving, p, gains) / B, ent


def test_table_weights_fixture():
    gains, p, z, y = _fixture_terms()
    xs, Ls, R, ent = _oracle_terms(gains, p, z, y, 0.5)
    assert float(grl_loss(xs, p, y, gains, w_s=100.0, w_r=1.0)) == pytest.approx(100 * Ls - R, rel=1e-12)
    assert float(srl_loss(xs, p, z, y, gains, w_s=1.0, w_r=1.0, w_e=1e-2)) == pytest.approx(
        Ls - R - 1e-2 * ent, rel=1e-12)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(0.05, 2.0))
@settings(max_examples=30, deadline=None)
def test_soft_rows_sum_to_one(z, T):
    x = ge.softmax_T(z, T).value
    assert np.allclose(x.sum(axis=1), 1.0, atol=1e-12)


def test_rate_report_and_csv(tmp_path, tiny):
    g, p = tiny
    alloc = Allocation(harden(np.eye(4, 3) + 0.1), p)
    rep = rate_report(alloc, g, wall_clock=0.5)
    assert rep.total == pytest.approx(sum_rate(alloc.x, p, g))
    assert rep.total_per_hz == pytest.approx(rep.total / B)
    assert rep.loads.sum() == 4
    write_reports_csv([rep, rep], tmp_path / "r.csv")
    write_loads_csv([rep], tmp_path / "l.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "event,ue,serving_bs,rate_bps,rate_bps_per_hz" and len(lines) == 9
    assert float(lines[1].split(",")[3]) == rep.rates[0]
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "event,bs,load,power_w"
