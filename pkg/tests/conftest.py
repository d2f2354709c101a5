import numpy as np
import pytest

from mmet import backend as B


@pytest.fixture(autouse=True)
def _float64():
    B.set_precision(64)
    yield
    B.set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x: np.ndarray, idx, h: float = 1e-6) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x[idx]`` (x mutated in place)."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)
