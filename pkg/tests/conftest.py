import numpy as np
import pytest

from stairnet.tensor import backend


@pytest.fixture(params=sorted(backend.available()))
def kernel_backend(request):
    """Run a test once per importable kernel backend."""
    previous = backend.active()
    backend.use(request.param)
    yield request.param
    backend.use(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (title, passed, seconds, budget, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, secs, budget, detail = ACCEPTANCE[n]
        extra = f" [{detail}]" if detail else ""
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  "
                      f"({secs:.2f}s / {budget:g}s){extra}")
