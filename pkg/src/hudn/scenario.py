"""Urban HUDN layouts: buildings, macro/small base stations and the UE grid."""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

MACRO = "macro"
SMALL = "small"


class ScenarioError(ValueError):
    """Invalid scenario configuration or request."""


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class Building:
    x: float
    y: float
    width: float
    length: float
    height: float

    def contains_xy(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.width and self.y <= py <= self.y + self.length


@dataclass(frozen=True)
class BsSite:
    id: int
    tier: str
    position: tuple[float, float, float]
    p_max: float


@dataclass(frozen=True)
class ScenarioConfig:
    side_length: float = 200.0
    n_macro: int = 5
    n_small: int = 100
    n_buildings: int = 20
    building_width: float = 20.0
    building_length: float = 20.0
    building_height: float = 30.0
    grid_resolution: float = 5.0
    macro_height: float = 25.0
    small_height: float = 10.0
    # roof-mounted sites sit this far above the roof so they are not inside the box
    roof_mast_height: float = 3.0
    ue_height: float = 1.5
    macro_power_dbm: float = 50.0
    small_power_dbm: float = 20.0
    seed: int = 0

    def validate(self) -> None:
        L = self.side_length
        for name in ("side_length", "building_width", "building_length", "building_height",
                     "grid_resolution", "macro_height", "small_height", "ue_height"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be positive")
        if self.roof_mast_height < 0:
            raise ScenarioError("roof_mast_height must be non-negative")
        if self.n_macro < 1:
            raise ScenarioError("need at least one macro BS")
        if self.n_small < 0 or self.n_buildings < 0:
            raise ScenarioError("counts must be non-negative")
        cells = L / self.grid_resolution
        if abs(cells - round(cells)) > 1e-9:
            raise ScenarioError("grid_resolution must divide side_length")
        if self.n_buildings and (self.building_width > L or self.building_length > L):
            raise ScenarioError("buildings must fit inside the cell area")
        if not self.macro_power_dbm > self.small_power_dbm:
            raise ScenarioError("macro power must exceed small-cell power")


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    buildings: tuple[Building, ...]
    sites: tuple[BsSite, ...]
    grid: np.ndarray = field(repr=False)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_grid(self) -> int:
        return len(self.grid)

    @property
    def site_positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sites], dtype=np.float64).reshape(-1, 3)

    @property
    def p_max(self) -> np.ndarray:
        return np.array([s.p_max for s in self.sites], dtype=np.float64)

    def digest(self) -> str:
        return hashlib.sha256(dumps_scenario(self).encode()).hexdigest()


@dataclass(frozen=True)
class Event:
    active_ue: tuple[int, ...]

    @property
    def K_a(self) -> int:
        return len(self.active_ue)

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.active_ue, dtype=np.intp)


def macro_positions(M: int, L: float) -> list[tuple[float, float]]:
    """Deterministic even layout of ``M`` macro sites over an L x L cell."""
    root = math.isqrt(M)
    if root * root == M:
        step = L / root
        return [((i + 0.5) * step, (j + 0.5) * step) for i in range(root) for j in range(root)]
    inner = math.isqrt(M - 1)
    if inner * inner == M - 1 and inner % 2 == 0:
        step = L / inner
        lattice = [((i + 0.5) * step, (j + 0.5) * step) for i in range(inner) for j in range(inner)]
        return [(L / 2, L / 2)] + lattice
    return [((k + 0.5) * L / M, (k + 0.5) * L / M) for k in range(M)]


def _grid(cfg: ScenarioConfig) -> np.ndarray:
    n = int(round(cfg.side_length / cfg.grid_resolution))
    c = (np.arange(n) + 0.5) * cfg.grid_resolution
    gx, gy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(n * n, cfg.ue_height)])


def _site_height(x, y, default, buildings, mast):
    roofs = [b.height for b in buildings if b.contains_xy(x, y)]
    return max(roofs) + mast if roofs else default


def generate_scenario(config: ScenarioConfig) -> Scenario:
    config.validate()
    L = config.side_length
    rng = np.random.default_rng(config.seed)
    buildings = []
    for _ in range(config.n_buildings):
        bx = float(rng.uniform(0.0, L - config.building_width))
        by = float(rng.uniform(0.0, L - config.building_length))
        buildings.append(Building(bx, by, config.building_width, config.building_length,
                                  config.building_height))
    sites = []
    p_macro = dbm_to_watt(config.macro_power_dbm)
    p_small = dbm_to_watt(config.small_power_dbm)
    for x, y in macro_positions(config.n_macro, L):
        z = _site_height(x, y, config.macro_height, buildings, config.roof_mast_height)
        sites.append(BsSite(len(sites), MACRO, (float(x), float(y), float(z)), p_macro))
    for _ in range(config.n_small):
        x, y = (float(v) for v in rng.uniform(0.0, L, size=2))
        z = _site_height(x, y, config.small_height, buildings, config.roof_mast_height)
        sites.append(BsSite(len(sites), SMALL, (x, y, float(z)), p_small))
    return Scenario(config, tuple(buildings), tuple(sites), _grid(config))


def sample_event(scenario: Scenario, K_a: int, seed) -> Event:
    """Draw ``K_a`` distinct grid points uniformly without replacement."""
    n = scenario.n_grid
    if K_a < 1 or K_a > n:
        raise ScenarioError(f"K_a={K_a} outside [1, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = rng.choice(n, size=K_a, replace=False)
    return Event(tuple(int(i) for i in np.sort(picked)))


# -- persistence ---------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def dumps_scenario(scenario: Scenario) -> str:
    lines = ["[config]"]
    for f in fields(ScenarioConfig):
        lines.append(f"{f.name} = {_fmt(getattr(scenario.config, f.name))}")
    lines += ["", "[buildings]", f"count = {len(scenario.buildings)}"]
    for k, b in enumerate(scenario.buildings):
        lines.append(f"b{k} = " + " ".join(_fmt(v) for v in (b.x, b.y, b.width, b.length, b.height)))
    lines += ["", "[sites]", f"count = {len(scenario.sites)}"]
    for s in scenario.sites:
        vals = [s.tier, *(_fmt(v) for v in s.position), _fmt(s.p_max)]
        lines.append(f"s{s.id} = " + " ".join(vals))
    return "\n".join(lines) + "\n"


def loads_scenario(text: str) -> Scenario:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        kwargs = {}
        for f in fields(ScenarioConfig):
            raw = cp["config"][f.name]
            kwargs[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        config = ScenarioConfig(**kwargs)
        buildings = []
        for k in range(int(cp["buildings"]["count"])):
            x, y, w, l, h = (float(v) for v in cp["buildings"][f"b{k}"].split())
            buildings.append(Building(x, y, w, l, h))
        sites = []
        for k in range(int(cp["sites"]["count"])):
            tier, *rest = cp["sites"][f"s{k}"].split()
            x, y, z, p = (float(v) for v in rest)
            sites.append(BsSite(k, tier, (x, y, z), p))
    except (KeyError, ValueError, configparser.Error) as exc:
        raise ScenarioError(f"malformed scenario file: {exc}") from exc
    config.validate()
    return Scenario(config, tuple(buildings), tuple(sites), _grid(config))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_scenario(scenario))


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return loads_scenario(fh.read())


def config_dict(config: ScenarioConfig) -> dict:
    return asdict(config)
