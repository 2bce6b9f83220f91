import numpy as np
import pytest

from camu_lab import data as data_mod
from camu_lab import nn

# Acceptance tests append one line here; printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def small_model():
    return nn.build_model([5, 7, 4, 3], seed=11)


@pytest.fixture(scope="session")
def blobs3():
    """Three well separated 6-d clusters, 40 rows each."""
    return data_mod.synth_blobs(3, 40, 6, 0.25, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
