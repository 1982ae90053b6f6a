import numpy as np
import pytest

from bigbird import kernels

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    before = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(before)


@pytest.fixture
def record():
    """``record(criterion, ok, detail)`` logs one acceptance line and prints it."""

    def _record(name, ok, detail, gating=True):
        status = "PASS" if ok else ("FAIL" if gating else "FAIL (non-gating)")
        line = f"[{status}] {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
