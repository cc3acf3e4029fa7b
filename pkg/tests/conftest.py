import numpy as np
import pytest

from trackdiff.data import make_gaussian_world

# Lines recorded by test_acceptance.py; printed in the terminal summary so
# they show up in plain `pytest -v` output as well.
ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def world6():
    """Three tracks of two coordinates each, correlated across tracks."""
    return make_gaussian_world(2, 0.6, seed=3)


@pytest.fixture(scope="session")
def world_rho8():
    return make_gaussian_world(1, 0.8, mean=0.0)
