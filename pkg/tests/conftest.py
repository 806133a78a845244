import os

import numpy as np
import pytest

os.environ.setdefault("NUMBA_DISABLE_PERFORMANCE_WARNINGS", "1")

from hmmdiv import paper_params, two_state  # noqa: E402
from hmmdiv import hjb  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return paper_params(1.8)


@pytest.fixture(scope="session")
def frozen_params():
    """No switching, chain started in the high-drift state."""
    return two_state(2.0, 1.0, 1.0, 0.5, 1.8, 0.0, 0.0, p1=1 - 1e-10)


@pytest.fixture(scope="session")
def solution(params):
    return hjb.solve_hjb(params)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240611)
