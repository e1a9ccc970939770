import numpy as np
import pytest

from clvd import tensor


@pytest.fixture(autouse=True)
def _debug_checks():
    tensor.set_debug(True)
    yield
    tensor.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.summary_line(n))
