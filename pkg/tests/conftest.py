import numpy as np
import pytest

from lupi import kernels
from lupi.tensor import RngState

BACKENDS = ["python"] + (["cython"] if kernels.compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend, restoring the default afterwards."""
    previous = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(previous)


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def record(request):
    """Store one acceptance verdict for the terminal summary."""
    results = request.config.acceptance_results

    def _record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        results[number] = (title, bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 13):
        title, passed, detail = results.get(number, ("(not run)", False, ""))
        line = f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
