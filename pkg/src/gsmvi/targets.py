"""Target distributions: unnormalized log densities with their scores."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import dsl
from .gaussian import GaussianParams, gaussian_log_density, gaussian_sample, gaussian_score


class TargetModel:
    """Log joint ``log p(theta, x)`` (up to a constant) and its gradient.

    Subclasses set ``dim`` and ``normalizer_known`` and implement
    :meth:`log_density` and :meth:`grad_log_density`. ``sample`` is ``None``
    when no exact sampler exists.
    """

    dim: int
    normalizer_known: bool = False
    sample = None

    def log_density(self, theta):
        raise NotImplementedError

    def grad_log_density(self, theta):
        raise NotImplementedError


class MeanMode(enum.Enum):
    ZERO = "zero"
    STANDARD_NORMAL_DRAW = "standard_normal_draw"


@dataclass(frozen=True)
class GaussianTargetSpec:
    dim: int
    condition_number: float = 1.0
    seed: int = 0
    mean_mode: MeanMode = MeanMode.STANDARD_NORMAL_DRAW

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not self.condition_number >= 1.0:
            raise ValueError(f"condition number must be >= 1, got {self.condition_number}")
        if self.dim == 1 and self.condition_number != 1.0:
            raise ValueError("a 1-D covariance has condition number 1")
        object.__setattr__(self, "mean_mode", MeanMode(self.mean_mode))


@dataclass(frozen=True)
class SinhArcsinhSpec:
    base: GaussianTargetSpec
    skewness: float = 0.0
    tail_weight: float = 1.0

    def __post_init__(self):
        if not self.tail_weight > 0:
            raise ValueError(f"tail weight must be positive, got {self.tail_weight}")


class GaussianTarget(TargetModel):
    """Normalized Gaussian target with exact sampler."""

    normalizer_known = True

    def __init__(self, params):
        self.params = params
        self.dim = params.dim

    def log_density(self, theta):
        return gaussian_log_density(self.params, theta)

    def grad_log_density(self, theta):
        return gaussian_score(self.params, theta)

    def sample(self, rng, n=None):
        return gaussian_sample(self.params, rng, size=n)


def random_orthogonal(dim, rng):
    """Haar-distributed orthogonal matrix: QR of a Gaussian matrix, R diagonal made positive."""
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def target_covariance(spec, rng):
    d = spec.dim
    if d == 1:
        eig = np.array([0.1])
    else:
        eig = 0.1 * np.power(float(spec.condition_number), np.arange(d) / (d - 1))
        eig[0] = 0.1
        eig[-1] = 0.1 * spec.condition_number
    q = random_orthogonal(d, rng)
    cov = (q * eig) @ q.T
    return 0.5 * (cov + cov.T)


def make_gaussian_target(spec):
    """Dense Gaussian with eigenvalues log-spaced on ``[0.1, 0.1 c]``.

    Draw order from ``default_rng(spec.seed)``: the ``d x d`` matrix for the
    rotation first, then (for the default mean mode) the ``d`` mean entries.
    """
    rng = np.random.default_rng(spec.seed)
    cov = target_covariance(spec, rng)
    if spec.mean_mode is MeanMode.ZERO:
        mean = np.zeros(spec.dim)
    else:
        mean = rng.standard_normal(spec.dim)
    return GaussianTarget(GaussianParams.from_moments(mean, cov))


def sinh_arcsinh_forward(z, s, t):
    """``x = sinh((asinh(z) + s) / t)`` elementwise."""
    if not t > 0:
        raise ValueError("tail weight must be positive")
    return np.sinh((np.arcsinh(z) + s) / t)


def sinh_arcsinh_inverse(x, s, t):
    """``z = sinh(t asinh(x) - s)`` elementwise."""
    if not t > 0:
        raise ValueError("tail weight must be positive")
    return np.sinh(t * np.arcsinh(x) - s)


def _log_cosh(u):
    return np.logaddexp(u, -u) - np.log(2.0)


class SinhArcsinhTarget(TargetModel):
    """Gaussian base pushed through the sinh-arcsinh map coordinatewise.

    The base draw is correlated; the transform acts on each coordinate.
    """

    normalizer_known = True

    def __init__(self, base, skewness, tail_weight):
        if not tail_weight > 0:
            raise ValueError("tail weight must be positive")
        self.base = base
        self.skewness = float(skewness)
        self.tail_weight = float(tail_weight)
        self.dim = base.dim

    def _inner(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x, self.tail_weight * np.arcsinh(x) - self.skewness

    def log_density(self, x):
        x, u = self._inner(x)
        z = np.sinh(u)
        log_jac = np.log(self.tail_weight) + _log_cosh(u) - 0.5 * np.log1p(x * x)
        return gaussian_log_density(self.base, z) + np.sum(log_jac, axis=-1)

    def grad_log_density(self, x):
        x, u = self._inner(x)
        z = np.sinh(u)
        r = np.sqrt(1.0 + x * x)
        dz_dx = self.tail_weight * np.cosh(u) / r
        dlogjac_dx = self.tail_weight * np.tanh(u) / r - x / (r * r)
        return gaussian_score(self.base, z) * dz_dx + dlogjac_dx

    def sample(self, rng, n=None):
        z = gaussian_sample(self.base, rng, size=n)
        return sinh_arcsinh_forward(z, self.skewness, self.tail_weight)


def make_sinh_arcsinh_target(spec):
    base = make_gaussian_target(spec.base)
    return SinhArcsinhTarget(base.params, spec.skewness, spec.tail_weight)


class DslTarget(TargetModel):
    """Unnormalized target defined by a parsed expression."""

    normalizer_known = False

    def __init__(self, program, dim):
        if isinstance(program, str):
            program = dsl.parse(program, dim)
        dsl.check_dimension(program, dim)
        self.program = program
        self.dim = dim

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 2:
            return np.array([dsl.evaluate(self.program, row) for row in theta])
        return dsl.evaluate(self.program, theta)

    def grad_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 2:
            return np.array([dsl.differentiate(self.program, row) for row in theta])
        return dsl.differentiate(self.program, theta)


def make_dsl_target(program, dim):
    return DslTarget(program, dim)
