import numpy as np
import pytest

from gsmvi.gaussian import GaussianParams


def random_spd(rng, d, lo=0.1, hi=10.0):
    """SPD matrix with eigenvalues drawn uniformly from [lo, hi]."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    eig = rng.uniform(lo, hi, size=d)
    cov = (q * eig) @ q.T
    return 0.5 * (cov + cov.T)


def random_gaussian(rng, d, lo=0.1, hi=10.0):
    return GaussianParams.from_moments(rng.standard_normal(d), random_spd(rng, d, lo, hi))


def central_diff_grad(f, x, rel_step=1e-5):
    """Central finite differences with step ``rel_step * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
