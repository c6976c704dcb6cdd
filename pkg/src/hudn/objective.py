"""SINR, effective rates and the training losses.

Plain-numpy functions evaluate allocations; the loss functions build
:mod:`~hudn.gradengine` graphs.  Arrays may carry a leading batch axis
(``(..., K, J)`` gains, ``(..., J)`` powers).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import gradengine as ge

LN2 = math.log(2.0)
INV_LN2 = 1.0 / LN2
DEFAULT_BANDWIDTH = 20e6
# thermal noise over 20 MHz with a 9 dB noise figure
DEFAULT_NOISE = 10.0 ** ((-174.0 + 9.0 + 10.0 * math.log10(DEFAULT_BANDWIDTH) - 30.0) / 10.0)
PROB_FLOOR = 1e-12
ENTROPY_FLOOR = 1e-300


class InfeasibleAllocation(ValueError):
    """Allocation violates the single-association or max-power constraint."""


@dataclass
class Allocation:
    x: np.ndarray
    p: np.ndarray
    hard: bool = True
    info: dict = field(default_factory=dict)

    @property
    def serving(self) -> np.ndarray:
        return np.argmax(self.x, axis=-1)

    def check(self, p_max) -> "Allocation":
        check_feasible(self.x, self.p, p_max, hard=self.hard)
        return self


@dataclass
class RateReport:
    rates: np.ndarray
    serving: np.ndarray
    loads: np.ndarray
    power: np.ndarray
    bandwidth: float
    sigma2: float
    wall_clock: float = 0.0

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    @property
    def total_per_hz(self) -> float:
        return self.total / self.bandwidth


def check_feasible(x, p, p_max, hard=True) -> None:
    x = np.asarray(x)
    p = np.asarray(p)
    if hard:
        if not np.all((x == 0) | (x == 1)) or not np.all(x.sum(axis=-1) == 1):
            raise InfeasibleAllocation("association rows must be one-hot")
    elif not np.allclose(x.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
        raise InfeasibleAllocation("soft association rows must sum to 1")
    if not np.all(p > 0) or not np.all(p <= np.asarray(p_max)):
        raise InfeasibleAllocation("powers must lie in (0, p_max]")


def harden(x_soft) -> np.ndarray:
    """One-hot of the row argmax; ties go to the lowest index."""
    x_soft = np.asarray(x_soft)
    out = np.zeros_like(x_soft, dtype=np.float64)
    np.put_along_axis(out, np.argmax(x_soft, axis=-1)[..., None], 1.0, axis=-1)
    return out


def one_hot(serving, J) -> np.ndarray:
    serving = np.asarray(serving)
    out = np.zeros(serving.shape + (J,))
    np.put_along_axis(out, serving[..., None], 1.0, axis=-1)
    return out


def _offdiag(J) -> np.ndarray:
    return 1.0 - np.eye(J)


def sinr_matrix(gains, p, sigma2) -> np.ndarray:
    recv = np.asarray(gains) * np.asarray(p)[..., None, :]
    interf = recv @ _offdiag(recv.shape[-1])
    return recv / (interf + sigma2)


def sinr(i, j, p, gains, sigma2) -> float:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(gains, dtype=np.float64)
    g = g[i] if g.ndim == 2 else g
    interf = float(np.dot(np.delete(p, j), np.delete(g, j)))
    return float(p[j] * g[j] / (interf + sigma2))


def spectral_efficiency(gains, p, sigma2) -> np.ndarray:
    """log2(1 + SINR) for every UE/BS pair."""
    return np.log1p(sinr_matrix(gains, p, sigma2)) * INV_LN2


def loads(x_hard) -> np.ndarray:
    return np.asarray(x_hard).sum(axis=-2)


def _share(x_hard) -> np.ndarray:
    return x_hard / np.maximum(loads(x_hard), 1.0)[..., None, :]


def effective_rate(i, j, x_hard, p, gains, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE) -> float:
    x_hard = np.asarray(x_hard)
    if x_hard[i].sum() == 0:
        raise InfeasibleAllocation(f"UE {i} is not associated")
    K_j = x_hard[:, j].sum()
    if K_j == 0:
        raise InfeasibleAllocation(f"BS {j} serves nobody")
    return float(B / K_j * math.log1p(sinr(i, j, p, gains, sigma2)) * INV_LN2)


def ue_rates(x_hard, p, gains, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE) -> np.ndarray:
    return (spectral_efficiency(gains, p, sigma2) * _share(np.asarray(x_hard))).sum(axis=-1) * B


def sum_rate(x_hard, p, gains, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE, p_max=None) -> float:
    """Total effective rate (bit/s) of a hard allocation."""
    x_hard = np.asarray(x_hard, dtype=np.float64)
    if p_max is not None:
        check_feasible(x_hard, p, p_max)
    se = spectral_efficiency(gains, p, sigma2)
    return (se * _share(x_hard)).sum(axis=(-2, -1)) * B


def rate_report(alloc: Allocation, gains, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE,
                wall_clock=0.0) -> RateReport:
    x = alloc.x if alloc.hard else harden(alloc.x)
    return RateReport(
        rates=ue_rates(x, alloc.p, gains, B, sigma2),
        serving=np.argmax(x, axis=-1),
        loads=loads(x).astype(np.int64),
        power=np.asarray(alloc.p, dtype=np.float64),
        bandwidth=B,
        sigma2=sigma2,
        wall_clock=wall_clock,
    )


def association_rates(gains, p, x_hard, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE) -> np.ndarray:
    """Rate UE i would get on BS j given the hard loads.

    Serving pairs use the current load; other pairs count the UE as one
    extra user of that BS.
    """
    x_hard = np.asarray(x_hard)
    load = loads(x_hard)[..., None, :]
    share = np.where(x_hard > 0, load, load + 1.0)
    return B * spectral_efficiency(gains, p, sigma2) / np.maximum(share, 1.0)


# -- differentiable objective --------------------------------------------


def two_path_rate(x_soft, p, gains, B=DEFAULT_BANDWIDTH, sigma2=DEFAULT_NOISE,
                  hard=None, rates=None) -> ge.Tensor:
    """Sum rate whose value is the hard-allocation rate, differentiable in
    both outputs.

    The power path treats the hardened association as a constant; the
    association path is sum(x_soft * rates) with the rates held fixed and
    contributes gradient only.  ``hard`` and ``rates`` default to values
    derived from the current inputs; pass them to freeze the surrogate.
    """
    x_soft, p = ge.as_tensor(x_soft), ge.as_tensor(p)
    gains = np.asarray(gains, dtype=np.float64)
    if hard is None:
        hard = harden(x_soft.value)
    if rates is None:
        rates = association_rates(gains, p.value, hard, B, sigma2)
    J = gains.shape[-1]
    recv = ge.mul(gains, ge.reshape(p, p.shape[:-1] + (1, J)))
    interf = ge.matmul(recv, _offdiag(J))
    snr = ge.div(recv, ge.add(interf, sigma2))
    se = ge.scale(ge.log1p(snr), INV_LN2)
    power_path = ge.scale(ge.sum(ge.mul(se, _share(hard)), axis=(-2, -1)), B)
    assoc_path = ge.grad_only(ge.sum(ge.mul(x_soft, rates), axis=(-2, -1)))
    return ge.sum(ge.add(power_path, assoc_path))


def supervised_loss(x_soft, y) -> ge.Tensor:
    x_soft = ge.as_tensor(x_soft)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != x_soft.shape:
        raise ValueError(f"label shape {y.shape} != output shape {x_soft.shape}")
    return ge.neg(ge.sum(ge.mul(ge.log(x_soft, floor=PROB_FLOOR), y)))


def entropy_loss(z, mask=None) -> ge.Tensor:
    e = ge.softmax_T(z, 1.0, mask)
    return ge.neg(ge.sum(ge.mul(e, ge.log(e, floor=ENTROPY_FLOOR))))


def _check_weights(**weights):
    for name, w in weights.items():
        if w < 0:
            raise ValueError(f"{name} must be non-negative")


def grl_loss(x_soft, p, y, gains, w_s=100.0, w_r=1.0, B=DEFAULT_BANDWIDTH,
             sigma2=DEFAULT_NOISE, hard=None, rates=None) -> ge.Tensor:
    """w_s * supervised - w_r * rate, with the rate in bit/s/Hz."""
    _check_weights(w_s=w_s, w_r=w_r)
    loss = ge.scale(supervised_loss(x_soft, y), w_s)
    if w_r:
        R = two_path_rate(x_soft, p, gains, B, sigma2, hard=hard, rates=rates)
        loss = ge.sub(loss, ge.scale(R, w_r / B))
    return loss


def srl_loss(x_soft, p, z, y, gains, w_s=1.0, w_r=1.0, w_e=1e-2, B=DEFAULT_BANDWIDTH,
             sigma2=DEFAULT_NOISE, mask=None, hard=None, rates=None) -> ge.Tensor:
    _check_weights(w_s=w_s, w_r=w_r, w_e=w_e)
    loss = grl_loss(x_soft, p, y, gains, w_s, w_r, B, sigma2, hard=hard, rates=rates)
    if w_e:
        loss = ge.sub(loss, ge.scale(entropy_loss(z, mask), w_e))
    return loss


# -- reporting -----------------------------------------------------------


def write_reports_csv(reports, path, labels=None) -> None:
    """Per-UE rows: event, ue, serving_bs, rate_bps, rate_bps_per_hz."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["event", "ue", "serving_bs", "rate_bps", "rate_bps_per_hz"])
        for e, rep in enumerate(reports):
            tag = labels[e] if labels is not None else e
            for i, (r, j) in enumerate(zip(rep.rates, rep.serving)):
                out.writerow([tag, i, int(j), f"{r:.17g}", f"{r / rep.bandwidth:.17g}"])


def write_loads_csv(reports, path, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["event", "bs", "load", "power_w"])
        for e, rep in enumerate(reports):
            tag = labels[e] if labels is not None else e
            for j, (k, pw) in enumerate(zip(rep.loads, rep.power)):
                out.writerow([tag, j, int(k), f"{pw:.17g}"])
