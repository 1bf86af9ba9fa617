import numpy as np
import pytest

from depthfuse.autodiff import set_check_finite


@pytest.fixture(autouse=True, scope="session")
def _finite_checks():
    # tests run in checked mode: NaN/Inf at any op boundary raises
    previous = set_check_finite(True)
    yield
    set_check_finite(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
