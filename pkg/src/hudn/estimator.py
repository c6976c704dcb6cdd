"""scikit-learn style wrappers around the trainer and the baseline schemes.

``fit`` takes a :class:`~hudn.scenario.Scenario` (or a radio map plus
per-site ``p_max``); ``predict`` maps a sequence of events to hard
allocations; ``score`` is the mean sum rate in bit/s/Hz.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import baselines, trainer
from .baselines import BaselineConfig
from .hetgraph import DEFAULT_DETECT_THRESHOLD, FeatureScaler
from .hgsage import DEFAULT_TEMPERATURE
from .objective import DEFAULT_BANDWIDTH, DEFAULT_NOISE, Allocation, sum_rate
from .radiomap import RadioMap, build_radio_map
from .scenario import Event, Scenario, ScenarioError


def check_gains(gains) -> np.ndarray:
    """(K, J) float64 array of strictly positive, finite gains."""
    gains = check_array(gains, dtype=np.float64, ensure_2d=True)
    if not np.all(gains > 0):
        raise ValueError("channel gains must be strictly positive")
    return gains


def check_radio_map(X, p_max=None) -> tuple[RadioMap, np.ndarray]:
    if isinstance(X, Scenario):
        p = X.p_max if p_max is None else p_max
        X = build_radio_map(X)
    elif isinstance(X, RadioMap):
        if p_max is None:
            raise ValueError("p_max is required when fitting on a bare radio map")
        p = p_max
    else:
        raise TypeError(f"expected Scenario or RadioMap, got {type(X).__name__}")
    check_gains(X.gains)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (X.gains.shape[1],) or not np.all(p > 0):
        raise ValueError("p_max must hold one positive value per site")
    return X, p


def check_events(events, n_grid: int, K_a: int | None = None) -> list[Event]:
    if isinstance(events, Event):
        events = [events]
    out = []
    for ev in events:
        if not isinstance(ev, Event):
            ev = Event(tuple(int(i) for i in ev))
        idx = ev.indices
        if ev.K_a == 0 or idx.min() < 0 or idx.max() >= n_grid:
            raise IndexError("event indices outside the radio map")
        if K_a is not None and ev.K_a != K_a:
            raise ScenarioError(f"event has {ev.K_a} active UEs, model expects {K_a}")
        out.append(ev)
    return out


class _AllocatorBase(BaseEstimator):
    def _check(self, events):
        check_is_fitted(self, "radio_map_")
        return check_events(events, self.radio_map_.gains.shape[0], self._event_size())

    def _event_size(self):
        return None

    def score(self, events, y=None) -> float:
        """Mean hard sum rate over ``events`` in bit/s/Hz."""
        events = self._check(events)
        allocs = self.predict(events)
        return float(np.mean([
            sum_rate(a.x, a.p, self.radio_map_.rows(ev.indices), self.bandwidth, self.sigma2)
            for a, ev in zip(allocs, events)
        ]) / self.bandwidth)


class HGSAGEAllocator(_AllocatorBase):
    """Graph neural allocator trained over many events, optionally
    fine-tuned per event with :meth:`fine_tune`."""

    def __init__(self, K_a=120, steps=1000, batch_size=64, lr=1e-4, decay=0.99, window=100,
                 temperature=DEFAULT_TEMPERATURE, w_s=100.0, w_r=1.0, event_pool=0,
                 skip_update_on_decay=True, hidden=128, head_hidden=64, srl_steps=5000,
                 srl_lr=1e-2, srl_w_s=1.0, srl_w_e=1e-2, convergence_bound=1e-3,
                 detect_threshold=DEFAULT_DETECT_THRESHOLD, bandwidth=DEFAULT_BANDWIDTH,
                 sigma2=DEFAULT_NOISE, seed=0):
        self.K_a = K_a
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.window = window
        self.temperature = temperature
        self.w_s = w_s
        self.w_r = w_r
        self.event_pool = event_pool
        self.skip_update_on_decay = skip_update_on_decay
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.srl_steps = srl_steps
        self.srl_lr = srl_lr
        self.srl_w_s = srl_w_s
        self.srl_w_e = srl_w_e
        self.convergence_bound = convergence_bound
        self.detect_threshold = detect_threshold
        self.bandwidth = bandwidth
        self.sigma2 = sigma2
        self.seed = seed

    def _event_size(self):
        return self.K_a

    def grl_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr, decay=self.decay,
            window=self.window, temperature=self.temperature, w_s=self.w_s, w_r=self.w_r,
            w_e=0.0, K_a=self.K_a, convergence_bound=self.convergence_bound, seed=self.seed,
            hidden=self.hidden, head_hidden=self.head_hidden,
            detect_threshold=self.detect_threshold, bandwidth=self.bandwidth,
            sigma2=self.sigma2, event_pool=self.event_pool,
            skip_update_on_decay=self.skip_update_on_decay,
        )

    def srl_config(self) -> trainer.TrainConfig:
        return trainer.with_overrides(
            self.grl_config(), steps=self.srl_steps, batch_size=1, lr=self.srl_lr,
            w_s=self.srl_w_s, w_e=self.srl_w_e, event_pool=0,
        )

    def fit(self, X, y=None, p_max=None, params=None, events=None):
        """Multi-event training on the radio map of ``X``.

        ``params`` warm-starts from an existing parameter set; ``events``
        restricts training to a fixed event list.
        """
        self.radio_map_, self.p_max_ = check_radio_map(X, p_max)
        self.params_, self.training_log_ = trainer.grl_train(
            self.radio_map_, self.grl_config(), self.p_max_, params=params, events=events)
        self.scaler_ = FeatureScaler.fit(self.radio_map_)
        return self

    def predict(self, events) -> list[Allocation]:
        events = self._check(events)
        cfg = self.grl_config()
        return [trainer.predict_event(self.params_, self.radio_map_, ev, self.p_max_, cfg,
                                      self.scaler_) for ev in events]

    def predict_proba(self, events) -> list[np.ndarray]:
        """Soft association matrices (rows sum to one over detected sites)."""
        return [a.info["x_soft"] for a in self.predict(events)]

    def fine_tune(self, event) -> tuple[Allocation, dict, list]:
        """Per-event fine-tuning; returns (allocation, tuned params, log).

        The fitted parameters are left untouched.
        """
        (event,) = self._check(event)
        cfg = self.srl_config()
        params, rows = trainer.srl_train(self.radio_map_, event, self.params_, cfg, self.p_max_)
        alloc = trainer.predict_event(params, self.radio_map_, event, self.p_max_, cfg, self.scaler_)
        return alloc, params, rows


class BaselineAllocator(_AllocatorBase):
    """One of the iterative reference schemes, keyed by ``name``."""

    def __init__(self, name="marap", max_outer_iters=50, max_sweeps=100,
                 convergence_eps=1e-6, golden_iters=40,
                 bandwidth=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE):
        self.name = name
        self.max_outer_iters = max_outer_iters
        self.max_sweeps = max_sweeps
        self.convergence_eps = convergence_eps
        self.golden_iters = golden_iters
        self.bandwidth = bandwidth
        self.sigma2 = sigma2

    def fit(self, X, y=None, p_max=None):
        if self.name not in baselines.BASELINES:
            raise ValueError(f"unknown baseline {self.name!r}; choose from {sorted(baselines.BASELINES)}")
        self.config_ = BaselineConfig(
            max_outer_iters=self.max_outer_iters, max_sweeps=self.max_sweeps,
            convergence_eps=self.convergence_eps, golden_iters=self.golden_iters,
        )
        self.config_.validate()
        self.radio_map_, self.p_max_ = check_radio_map(X, p_max)
        return self

    def predict(self, events: Sequence[Event]) -> list[Allocation]:
        events = self._check(events)
        solve = baselines.BASELINES[self.name]
        return [solve(self.radio_map_.rows(ev.indices), self.p_max_, self.sigma2, self.bandwidth,
                      config=self.config_) for ev in events]
