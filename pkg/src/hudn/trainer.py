"""Offline multi-event training (GRL), per-event fine-tuning (SRL) and inference."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import gradengine as ge
from . import hgsage
from .baselines import gen_labels
from .hetgraph import DEFAULT_DETECT_THRESHOLD, FeatureScaler, build_graph
from .objective import (
    DEFAULT_BANDWIDTH,
    DEFAULT_NOISE,
    Allocation,
    harden,
    rate_report,
    srl_loss,
    sum_rate,
    supervised_loss,
)
from .radiomap import RadioMap
from .scenario import Event, ScenarioError

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "r_n", "r_b", "lr", "L_s", "L_total", "updated")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-4
    decay: float = 0.99
    window: int = 100
    temperature: float = hgsage.DEFAULT_TEMPERATURE
    w_s: float = 100.0
    w_r: float = 1.0
    w_e: float = 0.0
    K_a: int = 120
    # relative stopping bound for SRL: |r_n - r_b| < bound * r_b
    convergence_bound: float = 1e-3
    seed: int = 0
    hidden: int = 128
    head_hidden: int = 64
    detect_threshold: float = DEFAULT_DETECT_THRESHOLD
    bandwidth: float = DEFAULT_BANDWIDTH
    sigma2: float = DEFAULT_NOISE
    # draw training events from a fixed pre-sampled pool of this size (labels cached)
    event_pool: int = 0
    # skip the parameter update on steps where the windowed rate did not improve
    skip_update_on_decay: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        if self.batch_size < 1 or self.window < 1 or self.steps < 0:
            raise ValueError("batch_size and window must be >= 1, steps >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not self.convergence_bound > 0:
            raise ValueError("convergence bound must be positive")
        if min(self.w_s, self.w_r, self.w_e) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.K_a < 1 or not self.temperature > 0:
            raise ValueError("K_a and temperature must be positive")


def srl_config(**overrides) -> TrainConfig:
    """Fine-tuning defaults: lighter supervision, entropy bonus, 5000-step cap."""
    base = dict(steps=5000, batch_size=1, lr=1e-2, w_s=1.0, w_r=1.0, w_e=1e-2)
    base.update(overrides)
    return TrainConfig(**base)


class RateMemory:
    """Append-only record of per-sample rates."""

    def __init__(self):
        self.rates: list[float] = []

    def __len__(self):
        return len(self.rates)

    def extend(self, values):
        self.rates.extend(float(v) for v in np.atleast_1d(values))

    def window_mean(self, length: int) -> float:
        if not self.rates:
            return 0.0
        recent = self.rates[-length:]
        return float(sum(recent) / len(recent))


class TrainingAborted(ge.NonFiniteError):
    """Training hit a non-finite value; ``checkpoint`` holds the last good params."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _split_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _labels(graph, p_max, config):
    return gen_labels(graph.gains, p_max, config.sigma2, config.bandwidth)


def _save(config, params, name, meta):
    if not config.checkpoint_dir:
        return None
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    path = os.path.join(config.checkpoint_dir, name)
    ge.save_checkpoint(path, params, meta)
    return path


def _loss_terms(batch, theta, y, config):
    x, p, z = hgsage.forward_batch(batch, theta, config.temperature)
    L_s = supervised_loss(x, y)
    total = srl_loss(x, p, z, y, batch.gains, config.w_s, config.w_r, config.w_e,
                     config.bandwidth, config.sigma2, mask=batch.mask)
    R = sum_rate(harden(x.value), p.value, batch.gains, config.bandwidth, config.sigma2)
    return total, L_s, np.atleast_1d(R) / config.bandwidth


def grl_train(radio_map: RadioMap, config: TrainConfig, p_max, params=None, events=None):
    """Batched training over freshly activated events.

    ``events``, when given, is a fixed training set drawn from uniformly
    instead of activating new events.  The optimiser steps only when the mean rate of the last ``window``
    samples beats the best such mean so far; otherwise the learning rate
    decays by ``decay``.  Returns (params, log rows).
    """
    config.validate()
    p_max = np.asarray(p_max, dtype=np.float64)
    init_seed, event_seed = _split_seeds(config.seed, 2)
    J = radio_map.gains.shape[1]
    if params is None:
        params = hgsage.init_params((J, config.K_a), init_seed, config.hidden, config.head_hidden)
    params = {k: v.copy() for k, v in params.items()}
    scaler = FeatureScaler.fit(radio_map)
    rng = np.random.default_rng(event_seed)
    n_grid = radio_map.gains.shape[0]
    if config.K_a > n_grid:
        raise ScenarioError(f"K_a={config.K_a} exceeds the {n_grid} grid points")

    def draw():
        picked = rng.choice(n_grid, size=config.K_a, replace=False)
        return Event(tuple(int(i) for i in np.sort(picked)))

    pool, cache = None, {}
    if events is not None:
        pool = list(events)
        if not pool or any(ev.K_a != config.K_a for ev in pool):
            raise ScenarioError(f"training events must be non-empty with K_a={config.K_a}")
    elif config.event_pool:
        pool = [draw() for _ in range(config.event_pool)]

    def sample():
        if pool is None:
            return draw()
        return pool[int(rng.integers(len(pool)))]

    opt = ge.Adam(lr=config.lr)
    lr = config.lr
    memory, r_b = RateMemory(), 0.0
    rows = []
    for step in range(1, config.steps + 1):
        events = [sample() for _ in range(config.batch_size)]
        graphs, labels = [], []
        for ev in events:
            key = ev.active_ue
            if key not in cache:
                g = build_graph(radio_map, ev, config.detect_threshold, scaler, p_max=p_max)
                cache_val = (g, _labels(g, p_max, config))
                if pool is not None:
                    cache[key] = cache_val
            else:
                cache_val = cache[key]
            graphs.append(cache_val[0])
            labels.append(cache_val[1])
        batch = hgsage.GraphBatch.from_graphs(graphs, p_max)
        theta = hgsage.leaves(params)
        try:
            total, L_s, rates = _loss_terms(batch, theta, np.stack(labels), config)
            memory.extend(rates)
            r_n = memory.window_mean(config.window)
            updated = r_n > r_b or not config.skip_update_on_decay
            if updated:
                ge.backward(ge.scale(total, 1.0 / config.batch_size))
                opt.lr = lr
                params = opt.step(params, {k: t.grad for k, t in theta.items()})
            if r_n > r_b:
                r_b = r_n
            else:
                lr *= config.decay
        except ge.NonFiniteError as exc:
            path = _save(config, params, f"grl_abort_step{step}.ckpt", {"step": step})
            raise TrainingAborted(f"GRL step {step}: {exc}", path) from exc
        rows.append({
            "step": step,
            "r_n": r_n,
            "r_b": r_b,
            "lr": lr,
            "L_s": float(L_s) / config.batch_size,
            "L_total": float(total) / config.batch_size,
            "updated": int(updated),
        })
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            _save(config, params, f"grl_step{step}.ckpt", {"step": step})
        if step % 100 == 0:
            log.info("GRL step %d r_n=%.4f r_b=%.4f lr=%.3g", step, r_n, r_b, lr)
    return params, rows


def srl_train(radio_map: RadioMap, event: Event, params_grl, config: TrainConfig, p_max):
    """Fine-tune on one event; returns the best-rate snapshot seen and the log.

    Stops when the mean rate of a completed window differs from the
    previous window's mean by less than ``convergence_bound`` (relative),
    or after ``steps`` updates.  The starting parameters are themselves a
    candidate, so the returned rate never falls below the GRL rate.
    """
    config.validate()
    p_max = np.asarray(p_max, dtype=np.float64)
    if event.K_a != hgsage.feature_dims(params_grl)[1]:
        raise ValueError("event size does not match the model's K_a")
    if event.indices.max() >= radio_map.gains.shape[0]:
        raise IndexError("event indices outside the radio map")
    scaler = FeatureScaler.fit(radio_map)
    graph = build_graph(radio_map, event, config.detect_threshold, scaler, p_max=p_max)
    batch = hgsage.GraphBatch.from_graphs([graph], p_max)
    y = _labels(graph, p_max, config)[None]
    params = {k: v.copy() for k, v in params_grl.items()}
    best, best_R = params, -np.inf
    opt = ge.Adam(lr=config.lr)
    memory, r_b = RateMemory(), 0.0
    rows = []
    for step in range(1, config.steps + 1):
        theta = hgsage.leaves(params)
        try:
            total, L_s, rates = _loss_terms(batch, theta, y, config)
        except ge.NonFiniteError as exc:
            raise TrainingAborted(f"SRL step {step}: {exc}") from exc
        R = float(rates[0])
        if R > best_R:
            best, best_R = params, R
        memory.extend(rates)
        ge.backward(total)
        try:
            params = opt.step(params, {k: t.grad for k, t in theta.items()})
        except ge.NonFiniteError as exc:
            raise TrainingAborted(f"SRL step {step}: {exc}") from exc
        stop = False
        if len(memory) % config.window == 0:
            r_n = memory.window_mean(config.window)
            e = config.convergence_bound
            stop = math.isinf(e) or abs(r_n - r_b) < e * r_b
            r_b = r_n
        rows.append({
            "step": step,
            "r_n": memory.window_mean(config.window),
            "r_b": r_b,
            "lr": config.lr,
            "L_s": float(L_s),
            "L_total": float(total),
            "updated": 1,
        })
        if stop:
            break
    # the final update has not been scored yet
    out = hgsage.forward(graph, params, config.temperature, p_max)
    R = float(sum_rate(harden(out.x_soft), out.p, graph.gains, config.bandwidth, config.sigma2))
    if R / config.bandwidth > best_R:
        best, best_R = params, R / config.bandwidth
    return best, rows


def predict_event(params, radio_map, event, p_max, config: TrainConfig, scaler=None) -> Allocation:
    graph = build_graph(radio_map, event, config.detect_threshold, scaler, p_max=p_max)
    out = hgsage.forward(graph, params, config.temperature, p_max)
    return Allocation(harden(out.x_soft), out.p, hard=True, info={"x_soft": out.x_soft})


def evaluate(params, radio_map: RadioMap, events, p_max, config: TrainConfig = TrainConfig()):
    """Hard allocations and rate reports for ``events`` with per-event wall-clock."""
    scaler = FeatureScaler.fit(radio_map)
    reports = []
    for ev in events:
        t0 = time.perf_counter()
        alloc = predict_event(params, radio_map, ev, p_max, config, scaler)
        elapsed = time.perf_counter() - t0
        reports.append(rate_report(alloc, radio_map.rows(ev.indices), config.bandwidth,
                                   config.sigma2, elapsed))
    return reports


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(LOG_COLUMNS)
        for r in rows:
            out.writerow([r["step"], *(f"{r[c]:.17g}" for c in LOG_COLUMNS[1:6]), r["updated"]])


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
