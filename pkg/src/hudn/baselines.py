"""Deterministic comparison schemes and the exhaustive oracle.

* ``marap``       max-SINR association, every site at full power
* ``msua``        log-utility local search at a fixed power vector
* ``msuapc``      ``msua`` alternated with per-site power ascent (log-utility)
* ``uamwser``     sum-rate local search at full power
* ``juapcmwser``  ``uamwser`` alternated with power ascent (sum rate)

The local searches start from the max-SINR association and sweep the UEs
in index order, moving a UE to the site that most improves the objective
(ties to the lowest index) and stopping after a sweep without moves.
Power ascent runs a golden-section search on log10(p_j) for one site at a
time and only keeps strict improvements, so every objective trace is
monotone.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .objective import (
    DEFAULT_BANDWIDTH,
    DEFAULT_NOISE,
    Allocation,
    one_hot,
    sinr_matrix,
    spectral_efficiency,
    sum_rate,
)

POWER_FLOOR = 1e-6
UTILITY_GUARD = 1e-30
SUM_RATE = "sum_rate"
LOG_UTILITY = "log_utility"
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class BudgetExceeded(ValueError):
    """Exhaustive search would exceed its enumeration budget."""


@dataclass(frozen=True)
class BaselineConfig:
    max_outer_iters: int = 50
    max_sweeps: int = 100
    power_grid_levels: int = 5
    convergence_eps: float = 1e-6
    golden_iters: int = 40
    enumeration_budget: int = 10_000_000

    def validate(self) -> None:
        if min(self.max_outer_iters, self.max_sweeps, self.power_grid_levels, self.golden_iters) < 1:
            raise ValueError("iteration caps and grid levels must be positive")
        if not self.convergence_eps > 0:
            raise ValueError("convergence_eps must be positive")


DEFAULT_CONFIG = BaselineConfig()


def _per_user(se, load, objective, B):
    rate = B * se / np.maximum(load, 1.0)
    if objective == SUM_RATE:
        return rate
    if objective == LOG_UTILITY:
        return np.log(rate + UTILITY_GUARD)
    raise ValueError(f"unknown objective {objective!r}")


def objective_value(serving, p, gains, objective=SUM_RATE, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE):
    serving = np.asarray(serving)
    se = spectral_efficiency(gains, p, sigma2)
    load = np.bincount(serving, minlength=se.shape[1]).astype(np.float64)
    rows = np.arange(len(serving))
    return float(_per_user(se[rows, serving], load[serving], objective, B).sum())


def max_sinr_association(gains, p, sigma2=DEFAULT_NOISE) -> np.ndarray:
    return np.argmax(sinr_matrix(gains, p, sigma2), axis=-1)


def association_sweeps(serving, p, gains, objective, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE,
                       max_sweeps=100):
    """Single-UE reassignment sweeps at fixed power.

    Returns (serving, converged, trace) with trace[k] the objective after
    sweep k (trace[0] is the starting value).
    """
    serving = np.array(serving, dtype=np.intp)
    se = spectral_efficiency(gains, p, sigma2)
    K, J = se.shape
    member = np.zeros((K, J), dtype=bool)
    member[np.arange(K), serving] = True
    load = member.sum(axis=0).astype(np.float64)

    def totals(ld):
        return np.where(member, _per_user(se, ld[None, :], objective, B), 0.0).sum(axis=0)

    cur = objective_value(serving, p, gains, objective, B, sigma2)
    trace = [cur]
    for _ in range(max_sweeps):
        moved = False
        for i in range(K):
            a = serving[i]
            f_now, f_plus, f_minus = totals(load), totals(load + 1.0), totals(load - 1.0)
            own_minus = _per_user(se[i, a], load[a] - 1.0, objective, B) if load[a] > 1 else 0.0
            gain_b = f_plus - f_now + _per_user(se[i], load + 1.0, objective, B)
            loss_a = (f_minus[a] - own_minus if load[a] > 1 else 0.0) - f_now[a]
            delta = gain_b + loss_a
            delta[a] = 0.0
            b = int(np.argmax(delta))
            if delta[b] > 1e-12 * max(1.0, abs(cur)):
                member[i, a], member[i, b] = False, True
                load[a] -= 1.0
                load[b] += 1.0
                serving[i] = b
                cur = objective_value(serving, p, gains, objective, B, sigma2)
                moved = True
        trace.append(cur)
        if not moved:
            return serving, True, trace
    return serving, False, trace


def _golden_max(f, lo, hi, iters):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def power_coordinate_ascent(x_hard, gains, p_init, p_max, objective=SUM_RATE, B=DEFAULT_BANDWIDTH,
                            sigma2=DEFAULT_NOISE, config: BaselineConfig = DEFAULT_CONFIG):
    """Cyclic per-site golden-section search over [p_floor, p_max].

    Returns (p, converged, trace) where trace holds the objective after
    each full cycle.
    """
    x_hard = np.asarray(x_hard)
    serving = np.argmax(x_hard, axis=-1) if x_hard.ndim == 2 else np.asarray(x_hard)
    p_max = np.asarray(p_max, dtype=np.float64)
    p = np.clip(np.array(p_init, dtype=np.float64), POWER_FLOOR * p_max, p_max)
    cur = objective_value(serving, p, gains, objective, B, sigma2)
    trace = [cur]
    for _ in range(config.max_outer_iters):
        start = cur
        for j in range(len(p)):
            lo, hi = math.log10(POWER_FLOOR * p_max[j]), math.log10(p_max[j])

            def at(v, j=j):
                trial = p.copy()
                trial[j] = v
                return objective_value(serving, trial, gains, objective, B, sigma2)

            t_best, f_best = _golden_max(lambda t: at(min(10.0**t, p_max[j])), lo, hi, config.golden_iters)
            v_best = min(10.0**t_best, p_max[j])
            # the interval ends are tried at their exact values
            for v in (p_max[j], POWER_FLOOR * p_max[j]):
                fv = at(v)
                if fv > f_best:
                    v_best, f_best = v, fv
            if f_best > cur:
                p[j] = v_best
                cur = f_best
        trace.append(cur)
        if cur - start < config.convergence_eps * max(1.0, abs(start)):
            return p, True, trace
    return p, False, trace


def _alloc(serving, p, J, **info) -> Allocation:
    return Allocation(one_hot(serving, J), np.asarray(p, dtype=np.float64), hard=True, info=info)


def marap(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
          config: BaselineConfig = DEFAULT_CONFIG) -> Allocation:
    p = np.asarray(p_max, dtype=np.float64).copy()
    return _alloc(max_sinr_association(gains, p, sigma2), p, len(p), converged=True)


def _local_search(gains, p, objective, sigma2, B, config):
    start = max_sinr_association(gains, p, sigma2)
    return association_sweeps(start, p, gains, objective, B, sigma2, config.max_sweeps)


def msua(gains, p, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
         config: BaselineConfig = DEFAULT_CONFIG) -> Allocation:
    """Log-utility association at the fixed power vector ``p``."""
    p = np.asarray(p, dtype=np.float64).copy()
    serving, ok, trace = _local_search(gains, p, LOG_UTILITY, sigma2, B, config)
    return _alloc(serving, p, len(p), converged=ok, trace=trace)


def uamwser(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
            config: BaselineConfig = DEFAULT_CONFIG) -> Allocation:
    """Sum-rate association at full power."""
    p = np.asarray(p_max, dtype=np.float64).copy()
    serving, ok, trace = _local_search(gains, p, SUM_RATE, sigma2, B, config)
    return _alloc(serving, p, len(p), converged=ok, trace=trace)


def _joint(gains, p_max, objective, sigma2, B, config):
    p = np.asarray(p_max, dtype=np.float64).copy()
    J = len(p)
    serving, ok, _ = _local_search(gains, p, objective, sigma2, B, config)
    cur = objective_value(serving, p, gains, objective, B, sigma2)
    trace = [cur]
    converged = False
    for _ in range(config.max_outer_iters):
        p, ok_p, _ = power_coordinate_ascent(serving, gains, p, p_max, objective, B, sigma2, config)
        serving, ok_a, _ = association_sweeps(serving, p, gains, objective, B, sigma2, config.max_sweeps)
        new = objective_value(serving, p, gains, objective, B, sigma2)
        trace.append(new)
        done = new - cur < config.convergence_eps * max(1.0, abs(cur))
        cur = new
        if done:
            converged = ok_p and ok_a
            break
    return _alloc(serving, p, J, converged=converged, trace=trace)


def msuapc(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
           config: BaselineConfig = DEFAULT_CONFIG) -> Allocation:
    return _joint(gains, p_max, LOG_UTILITY, sigma2, B, config)


def juapcmwser(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
               config: BaselineConfig = DEFAULT_CONFIG) -> Allocation:
    return _joint(gains, p_max, SUM_RATE, sigma2, B, config)


def msuamp(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
           config: BaselineConfig = DEFAULT_CONFIG) -> Allocation:
    return msua(gains, p_max, sigma2, B, config)


def gen_labels(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH,
               config: BaselineConfig = DEFAULT_CONFIG) -> np.ndarray:
    """One-hot association labels from the full-power log-utility search."""
    return msua(gains, p_max, sigma2, B, config).x


def power_levels(p_max, levels) -> np.ndarray:
    """(J, levels) grid, log-spaced from the floor up to and including p_max."""
    p_max = np.asarray(p_max, dtype=np.float64)
    if levels == 1:
        return p_max[:, None].copy()
    grid = np.geomspace(POWER_FLOOR * p_max, p_max, levels, axis=1)
    grid[:, -1] = p_max
    return grid


def brute_force_oracle(gains, p_max, sigma2=DEFAULT_NOISE, B=DEFAULT_BANDWIDTH, levels=None,
                       config: BaselineConfig = DEFAULT_CONFIG) -> tuple[Allocation, float]:
    """Exact maximum of the sum rate over every association and gridded power.

    The first maximiser in enumeration order (powers outer, associations
    inner, both lexicographic) is returned.
    """
    gains = np.asarray(gains, dtype=np.float64)
    K, J = gains.shape
    levels = config.power_grid_levels if levels is None else levels
    n_assoc, n_power = J**K, levels**J
    if n_assoc * n_power > config.enumeration_budget:
        raise BudgetExceeded(f"{n_assoc} associations x {n_power} power vectors exceeds budget")
    assoc = np.array(list(itertools.product(range(J), repeat=K)), dtype=np.intp).reshape(n_assoc, K)
    counts = np.zeros((n_assoc, J))
    np.add.at(counts, (np.repeat(np.arange(n_assoc), K), assoc.ravel()), 1.0)
    share = np.take_along_axis(counts, assoc, axis=1)
    rows = np.arange(K)
    grid = power_levels(p_max, levels)
    best_r, best = -np.inf, None
    for combo in itertools.product(range(levels), repeat=J):
        p = grid[np.arange(J), combo]
        se = spectral_efficiency(gains, p, sigma2)
        r = (se[rows, assoc] / share).sum(axis=1) * B
        k = int(np.argmax(r))
        if r[k] > best_r:
            best_r, best = float(r[k]), (assoc[k].copy(), p.copy())
    alloc = _alloc(best[0], best[1], J, converged=True)
    return alloc, float(sum_rate(alloc.x, alloc.p, gains, B, sigma2))


BASELINES = {
    "marap": marap,
    "msuamp": msuamp,
    "msuapc": msuapc,
    "uamwser": uamwser,
    "juapcmwser": juapcmwser,
}
