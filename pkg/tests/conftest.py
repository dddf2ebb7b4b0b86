import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sparse_raster(rng, shape=(16, 16), density=0.1, high=5):
    r = rng.integers(1, high + 1, size=shape).astype(float)
    return np.where(rng.random(shape) < density, r, 0.0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
