import sys

import numpy as np
import pytest

from spikingedn.autograd import precision


@pytest.fixture(autouse=True)
def float64_engine():
    """Oracle comparisons need 64-bit headroom; tests that train switch back explicitly."""
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
