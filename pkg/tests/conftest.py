import numpy as np
import pytest

from kpft import backend
from kpft.model import ModelGeometry

SMALL = ModelGeometry(layers=2, hidden=8, ffn=16, heads=2, vocab=6, max_seq=5, classes=3)


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    with backend.use(request.param):
        yield request.param


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def small_geometry():
    return SMALL


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
