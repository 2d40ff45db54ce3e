import numpy as np
import pytest

from advcoreset import models


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_diff(fn, x0, step=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        hi = x0.copy(); hi[i] += step
        lo = x0.copy(); lo[i] -= step
        grad[i] = (fn(hi) - fn(lo)) / (2 * step)
    return grad


def rel_err(a, b):
    a = np.asarray(a); b = np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def small_mlp(input_dim=3, classes=3, hidden=(5, 4), seed=0):
    spec = models.ModelSpec(arch="mlp", input_dim=input_dim,
                            classes=classes, hidden=hidden)
    return models.init(spec, seed)
