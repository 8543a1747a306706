import os

import numpy as np
import pytest
from hypothesis import settings

_ACCEPTANCE_LINES = []

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_linear():
    from fpfc.data import gen_linear_clusters
    return gen_linear_clusters(6, 2, 40, 3, b=3.0, sigma=0.1, seed=3, fractions=(0.6, 0.2, 0.2))


@pytest.fixture(scope="session")
def tiny_softmax():
    from fpfc.data import gen_softmax_federation
    return gen_softmax_federation([3, 3], seed=1, size_range=(60, 120), p=5, n_classes=3)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
