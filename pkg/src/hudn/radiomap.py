"""Large-scale channel gains between every UE grid point and every site."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .scenario import Building, Scenario


class RadioMapError(ValueError):
    """Bad radio-map file or mismatched scenario."""


@dataclass(frozen=True)
class PathLossParams:
    """Dual-slope LoS/NLoS model; gains are linear at the 1 m reference."""

    D_L: float = 10.38
    D_NL: float = 14.54
    theta_L: float = 2.09
    theta_NL: float = 3.75

    def validate(self) -> None:
        if min(self.D_L, self.D_NL, self.theta_L, self.theta_NL) <= 0:
            raise ValueError("path-loss parameters must be positive")
        if not self.theta_NL > self.theta_L:
            raise ValueError("NLoS exponent must exceed the LoS exponent")


@dataclass(frozen=True)
class RadioMap:
    gains: np.ndarray
    scenario_digest: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.gains.shape

    def rows(self, indices) -> np.ndarray:
        return self.gains[np.asarray(indices, dtype=np.intp)]


def _boxes(buildings) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([[b.x, b.y, 0.0] for b in buildings], dtype=np.float64).reshape(-1, 3)
    hi = np.array([[b.x + b.width, b.y + b.length, b.height] for b in buildings],
                  dtype=np.float64).reshape(-1, 3)
    return lo, hi


def _blocked(tx: np.ndarray, rx: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Vectorised slab test.

    ``tx``/``rx`` broadcast to (..., 3); boxes are (B, 3).  True where the
    open segment tx->rx meets a closed box.
    """
    if len(lo) == 0:
        return np.zeros(np.broadcast_shapes(tx.shape, rx.shape)[:-1], dtype=bool)
    d = (rx - tx)[..., None, :]
    o = tx[..., None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    enter = tmin.max(axis=-1)
    leave = tmax.min(axis=-1)
    hit = (enter <= leave) & (enter < 1.0) & (leave > 0.0)
    return hit.any(axis=-1)


def los_blocked(tx, rx, buildings: list[Building]) -> bool:
    """True iff the open segment between the two points meets any building."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if np.array_equal(tx, rx):
        raise ValueError("segment endpoints coincide")
    lo, hi = _boxes(buildings)
    return bool(_blocked(tx, rx, lo, hi))


def path_gain(w, los, params: PathLossParams = PathLossParams()):
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("distance must be positive")
    g = np.where(los, params.D_L * w ** (-params.theta_L), params.D_NL * w ** (-params.theta_NL))
    return float(g) if g.ndim == 0 else g


def build_radio_map(scenario: Scenario, params: PathLossParams = PathLossParams()) -> RadioMap:
    params.validate()
    grid = scenario.grid
    sites = scenario.site_positions
    lo, hi = _boxes(scenario.buildings)
    gains = np.empty((len(grid), len(sites)), dtype=np.float64)
    for j, site in enumerate(sites):
        w = np.sqrt(((grid - site) ** 2).sum(axis=1))
        if np.any(w == 0):
            raise RadioMapError(f"grid point coincides with site {j}")
        w = np.maximum(w, 1.0)
        los = ~_blocked(site[None, :], grid, lo, hi)
        gains[:, j] = path_gain(w, los, params)
    return RadioMap(gains, scenario.digest())


# -- persistence ---------------------------------------------------------

_MAGIC = b"RMAP"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQ64s")


def save_radio_map(radio_map: RadioMap, path) -> None:
    rows, cols = radio_map.gains.shape
    digest = radio_map.scenario_digest.encode("ascii").ljust(64, b"\0")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, rows, cols, digest))
        fh.write(np.ascontiguousarray(radio_map.gains, dtype="<f8").tobytes())


def load_radio_map(path, expected_digest: str | None = None) -> RadioMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise RadioMapError(f"{path}: truncated header")
    magic, version, rows, cols, digest = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != _VERSION:
        raise RadioMapError(f"{path}: not a version-{_VERSION} radio map")
    body = blob[_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise RadioMapError(f"{path}: expected {rows}x{cols} gains, got {len(body)} bytes")
    digest = digest.rstrip(b"\0").decode("ascii")
    if expected_digest is not None and digest != expected_digest:
        raise RadioMapError(f"{path}: scenario digest mismatch")
    gains = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return RadioMap(gains, digest)


def export_csv(radio_map: RadioMap, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["grid_index", "site_id", "gain"])
        for i, row in enumerate(radio_map.gains):
            for j, g in enumerate(row):
                out.writerow([i, j, f"{g:.17g}"])
