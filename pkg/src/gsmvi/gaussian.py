"""Multivariate Gaussian variational family.

All linear algebra goes through the lower Cholesky factor; no explicit
inverses are formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))


class LostPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a covariance matrix cannot be Cholesky-factorized."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def symmetrize(cov):
    cov = np.asarray(cov, dtype=float)
    return 0.5 * (cov + cov.T)


def cholesky(cov, jitter=False):
    """Lower Cholesky factor of ``cov``.

    With ``jitter=True`` a failed factorization is retried after adding
    ``lam * I`` with ``lam = 1e-10 * tr(cov) / d``, doubling ``lam`` up to
    three times.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        if not jitter:
            raise LostPositiveDefiniteError("covariance is not positive definite")
    d = cov.shape[0]
    lam = 1e-10 * np.trace(cov) / d
    for _ in range(4):
        try:
            return np.linalg.cholesky(cov + lam * np.eye(d))
        except np.linalg.LinAlgError:
            lam *= 2.0
    raise LostPositiveDefiniteError(
        "covariance is not positive definite (jitter retries exhausted)"
    )


@dataclass(frozen=True, eq=False)
class GaussianParams:
    """Gaussian ``N(mean, covariance)`` with its cached lower Cholesky factor.

    Build instances with :meth:`from_moments`; the raw constructor expects a
    consistent ``(mean, covariance, chol)`` triple and only validates it.
    """

    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = _readonly(self.mean)
        cov = _readonly(self.covariance)
        chol = _readonly(self.chol)
        if mean.ndim != 1:
            raise ValueError(f"mean must be a vector, got shape {mean.shape}")
        d = mean.shape[0]
        if cov.shape != (d, d) or chol.shape != (d, d):
            raise ValueError(
                f"covariance/chol must be {d}x{d}, got {cov.shape} and {chol.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("mean and covariance must be finite")
        if np.any(np.diag(chol) <= 0):
            raise LostPositiveDefiniteError("Cholesky factor has a nonpositive diagonal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def from_moments(cls, mean, covariance, jitter=False):
        """Symmetrize ``covariance``, factorize it and wrap the result."""
        cov = symmetrize(covariance)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got shape {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise ValueError("covariance must be finite")
        return cls(np.asarray(mean, dtype=float), cov, cholesky(cov, jitter=jitter))

    @classmethod
    def from_chol(cls, mean, chol):
        chol = np.tril(np.asarray(chol, dtype=float))
        return cls(np.asarray(mean, dtype=float), chol @ chol.T, chol)

    @classmethod
    def standard(cls, dim):
        """Zero mean, identity covariance."""
        eye = np.eye(dim)
        return cls(np.zeros(dim), eye, eye)

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_det(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def _check_points(self, points):
        x = np.asarray(points, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("points must be finite")
        return x

    def whiten(self, points):
        """Return ``L^{-1} (x - mean)`` for points of shape ``(d,)`` or ``(n, d)``."""
        x = self._check_points(points)
        diff = (x - self.mean).T
        return solve_triangular(self.chol, diff, lower=True, check_finite=False).T

    def precision_dot(self, vectors):
        """Return ``Sigma^{-1} v`` via two triangular solves."""
        v = np.asarray(vectors, dtype=float).T
        y = solve_triangular(self.chol, v, lower=True, check_finite=False)
        return solve_triangular(self.chol, y, lower=True, trans="T", check_finite=False).T


def gaussian_log_density(q, point):
    """Log density of ``q`` at ``point`` (or at each row of a 2-D array)."""
    z = q.whiten(point)
    quad = np.sum(z * z, axis=-1)
    out = -0.5 * (quad + q.dim * LOG_2PI + q.log_det())
    return float(out) if np.ndim(out) == 0 else out


def gaussian_score(q, point):
    """Score ``-Sigma^{-1} (x - mean)``."""
    x = q._check_points(point)
    return -q.precision_dot(x - q.mean)


def gaussian_sample(q, rng, size=None):
    """Draw ``mean + L z``.

    ``z`` is taken from ``rng.standard_normal`` coordinate by coordinate; with
    ``size=n`` the ``n`` draws consume the stream in row order, so a batch is
    identical to ``n`` consecutive single draws.
    """
    if size is None:
        z = rng.standard_normal(q.dim)
        return q.mean + q.chol @ z
    z = rng.standard_normal((size, q.dim))
    return q.mean + z @ q.chol.T


def gaussian_kl(q0, q1):
    """KL(q0 || q1) in closed form."""
    if q0.dim != q1.dim:
        raise ValueError(f"dimension mismatch: {q0.dim} vs {q1.dim}")
    # tr(S1^{-1} S0) = ||L1^{-1} L0||_F^2
    m = solve_triangular(q1.chol, q0.chol, lower=True, check_finite=False)
    trace_term = float(np.sum(m * m))
    z = q1.whiten(q0.mean)
    maha = float(z @ z)
    kl = 0.5 * (trace_term + maha - q0.dim + q1.log_det() - q0.log_det())
    return max(kl, 0.0)
