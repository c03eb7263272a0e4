import numpy as np
import pytest

from mctformer import kernels


@pytest.fixture(params=["python", "cython"])
def backend(request):
    """Run a test once per kernel backend (skips cython when not built)."""
    if request.param == "cython" and kernels.compiled is None:
        pytest.skip("compiled kernels not built")
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion.

    The line is printed immediately (visible with ``-s``) and again in the
    terminal summary so it always shows up in the test log.
    """
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
