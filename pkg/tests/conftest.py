import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hetsolve.timeloop import desk_problem

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def tiny_problem():
    """2 x 2 x 1 cells, 225 DOFs: small enough for dense oracles."""
    return desk_problem((2, 2, 1))


@pytest.fixture(scope="session")
def small_problem():
    """4 x 4 x 2 cells, 1215 DOFs."""
    return desk_problem((4, 4, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda t: int(t.split()[1].rstrip(':'))):
            terminalreporter.write_line(line)
