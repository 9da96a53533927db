import numpy as np
import pytest

from bayesforget.core import Dataset


def random_spd(rng, d, cond=50.0):
    """Random SPD matrix with eigenvalues spread over ``[1, cond]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.geomspace(1.0, cond, d)
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


def central_diff(fun, x, step=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step * (1.0 + abs(x[k]))
        g[k] = (fun(x + e) - fun(x - e)) / (2 * e[k])
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


@pytest.fixture
def conj_data():
    rng = np.random.default_rng(7)
    return Dataset(rng.normal(0.7, 1.0, size=(100, 1)))
