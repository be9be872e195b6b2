import numpy as np
import pytest

from nzlab.liouville import bohr_decomposition, build_projectors
from nzlab.model import build_friedrichs_model, build_small_model, build_spin_bath_model

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small():
    s = build_small_model(0.3)
    return s, build_projectors(s), bohr_decomposition(s.H_S)


@pytest.fixture(scope="session")
def spin3():
    s = build_spin_bath_model(3, 1.0)
    return s, build_projectors(s), bohr_decomposition(s.H_S)


@pytest.fixture(scope="session")
def friedrichs40():
    s = build_friedrichs_model(40)
    return s, build_projectors(s), bohr_decomposition(s.H_S)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
