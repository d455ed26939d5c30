from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from equiprice.grid import PQ, SLACK, Bus, Line, Network, StationConfig, parse_case
from equiprice.harness import DATA_DIR
from equiprice.pda import StationSystem

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ieee14() -> Network:
    return parse_case(DATA_DIR / "ieee14.json")


def four_bus() -> Network:
    """Small radial feeder: slack at bus 1, stations can sit on buses 3 and 4."""
    buses = [
        Bus(1, SLACK, v_nominal=1.02),
        Bus(2, PQ, base_load_p=20.0, base_load_q=8.0),
        Bus(3, PQ, base_load_p=15.0, base_load_q=5.0),
        Bus(4, PQ, base_load_p=10.0, base_load_q=4.0),
    ]
    lines = [
        Line(1, 2, 4.0, -12.0),
        Line(2, 3, 3.0, -9.0),
        Line(2, 4, 2.5, -8.0),
        Line(3, 4, 2.0, -6.0),
    ]
    return Network(tuple(buses), tuple(lines), 100.0, "four-bus")


@pytest.fixture
def tiny_system() -> StationSystem:
    """n=4, T=4, K=2 with a well-conditioned dispatch regularizer."""
    stations = (StationConfig(1, 3, 2.0, 0.5), StationConfig(2, 4, 1.0, 0.4))
    load = np.array([[1.0, 3.0, 2.0, 0.5], [0.2, 0.4, 1.5, 1.0]])
    return StationSystem(four_bus(), stations, load, dt_hours=0.25, dispatch_reg=20.0)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request) -> dict:
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
