import contextlib
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dcrnet import kernels  # noqa: E402

BACKENDS = kernels.available_backends()


@contextlib.contextmanager
def using_backend(name):
    """Route every kernel call made through the autodiff ops to ``name``."""
    old = kernels._impl, kernels.BACKEND
    kernels._impl, kernels.BACKEND = kernels.get_backend(name), name
    try:
        yield
    finally:
        kernels._impl, kernels.BACKEND = old


@pytest.fixture(params=BACKENDS)
def backend(request):
    with using_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """``criterion(n, title, ok, detail)`` prints and records one result line."""
    def record(n, title, ok, detail=""):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title}" + (
            f" ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
