import numpy as np
import pytest

from hudn.radiomap import build_radio_map
from hudn.scenario import ScenarioConfig, generate_scenario

# desk-scale layout: 2 macro + 20 small sites, 20 x 20 grid
D1 = dict(n_macro=2, n_small=20, n_buildings=10, grid_resolution=10.0)
# oracle-sized layout: 3 sites, events of 4 UEs
D0 = dict(n_macro=1, n_small=2, n_buildings=10, grid_resolution=10.0)


def d1_config(seed=0):
    return ScenarioConfig(**D1, seed=seed)


def d0_config(seed=0):
    return ScenarioConfig(**D0, seed=seed)


@pytest.fixture(scope="session")
def d1():
    sc = generate_scenario(d1_config())
    return sc, build_radio_map(sc)


@pytest.fixture(scope="session")
def d0():
    sc = generate_scenario(d0_config())
    return sc, build_radio_map(sc)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
