"""Gaussian score-matching VI.

Each update moves ``q0 = N(mu0, Sigma0)`` to the Gaussian closest to it in
KL(q0 || q) among those whose score at a sampled point ``theta`` equals the
target score ``g``. The projection has a closed form::

    r      = g' Sigma0 g + ((mu0 - theta)' g)^2
    rho    = positive root of rho (1 + rho) = r
    eps0   = Sigma0 g - mu0 + theta
    mu     = mu0 + 1/(1+rho) [I - (mu0-theta) g' / (1 + rho + (mu0-theta)' g)] eps0
    Sigma  = Sigma0 + (mu0-theta)(mu0-theta)' - (mu-theta)(mu-theta)'

``eps0`` is zero exactly when the scores of ``q0`` and the target already
agree at ``theta``; the update is then a no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianParams, LostPositiveDefiniteError, gaussian_sample, symmetrize
from .metrics import METRIC_STREAM_XOR, NegElboMonitor, TraceRecord


class RunAborted(RuntimeError):
    """An optimization run failed; ``trace`` holds the records written so far."""

    def __init__(self, message, trace, cause=None):
        super().__init__(message)
        self.trace = trace
        self.cause = cause


@dataclass(frozen=True)
class GsmConfig:
    iterations: int
    batch_size: int = 2
    init: GaussianParams | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class GsmUpdateDiagnostics:
    rho: float
    epsilon0: np.ndarray
    delta_mu: np.ndarray
    delta_sigma: np.ndarray
    constraint_residual: float
    theta: np.ndarray = field(repr=False, default=None)
    g: np.ndarray = field(repr=False, default=None)


def quadratic_rhs(g, q0, theta):
    """``g' Sigma0 g + ((mu0 - theta)' g)^2``."""
    lg = q0.chol.T @ g
    return float(lg @ lg + ((q0.mean - theta) @ g) ** 2)


def positive_root(r):
    """Positive root of ``rho (1 + rho) = r`` for ``r >= 0``."""
    if not math.isfinite(r):
        raise ValueError(f"non-finite quadratic coefficient {r!r}")
    if r < 0:
        raise ValueError(f"quadratic coefficient must be nonnegative, got {r!r}")
    s = math.sqrt(1.0 + 4.0 * r)
    if r < 1e-8:
        return 2.0 * r / (1.0 + s)
    return 0.5 * (s - 1.0)


def solve_rho(g, q0, theta):
    g = np.asarray(g, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if g.shape != (q0.dim,) or theta.shape != (q0.dim,):
        raise ValueError("g and theta must match the dimension of q0")
    return positive_root(quadratic_rhs(g, q0, theta))


def mean_step_matrix(q0, theta, g, rho):
    """The matrix ``A`` with ``delta_mu = A (g - score_q0(theta))``.

    Only used to cross-check the ``eps0`` form of the mean update.
    """
    u = q0.mean - theta
    d = q0.dim
    inner = np.eye(d) - np.outer(u, g) / (1.0 + rho + u @ g)
    return inner @ q0.covariance / (1.0 + rho)


def _constraint_residual(q, theta, g):
    return float(np.max(np.abs(q.precision_dot(theta - q.mean) + g)))


def gsm_update(q0, theta, g, jitter=False):
    """Closed-form KL projection of ``q0`` onto the score constraint at ``theta``.

    Returns:
        ``(q_new, diagnostics)``.

    Raises:
        LostPositiveDefiniteError: if the updated covariance fails to
            factorize; the exception's ``diagnostics`` holds the intermediates.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    d = q0.dim
    if theta.shape != (d,) or g.shape != (d,):
        raise ValueError(f"theta and g must have shape ({d},)")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(g))):
        raise ValueError("theta and g must be finite")

    u = q0.mean - theta
    ug = float(u @ g)
    lg = q0.chol.T @ g
    rho = positive_root(float(lg @ lg) + ug * ug)
    eps0 = q0.covariance @ g - u

    if not np.any(eps0):
        zero = np.zeros(d)
        diag = GsmUpdateDiagnostics(
            rho=rho,
            epsilon0=eps0,
            delta_mu=zero,
            delta_sigma=np.zeros((d, d)),
            constraint_residual=_constraint_residual(q0, theta, g),
            theta=theta,
            g=g,
        )
        return q0, diag

    # Sherman-Morrison applied to [(1 + rho) I + u g']^{-1} eps0
    a = 1.0 + rho
    delta_mu = (eps0 - u * (g @ eps0) / (a + ug)) / a
    mu = q0.mean + delta_mu
    v = mu - theta
    delta_sigma = symmetrize(np.outer(u, u) - np.outer(v, v))
    cov = symmetrize(q0.covariance + delta_sigma)

    partial = GsmUpdateDiagnostics(
        rho=rho,
        epsilon0=eps0,
        delta_mu=delta_mu,
        delta_sigma=delta_sigma,
        constraint_residual=math.inf,
        theta=theta,
        g=g,
    )
    try:
        q = GaussianParams.from_moments(mu, cov, jitter=jitter)
    except LostPositiveDefiniteError as exc:
        raise LostPositiveDefiniteError(str(exc), diagnostics=partial) from exc

    diag = GsmUpdateDiagnostics(
        rho=rho,
        epsilon0=eps0,
        delta_mu=delta_mu,
        delta_sigma=delta_sigma,
        constraint_residual=_constraint_residual(q, theta, g),
        theta=theta,
        g=g,
    )
    return q, diag


def gsm_step(q, model, batch_size, rng, jitter=False):
    """One batched iteration.

    Draws ``batch_size`` samples from ``q`` (consecutive draws from ``rng``),
    computes each single-sample projection from ``q`` and averages the mean
    and covariance increments. Calls ``model.grad_log_density`` exactly
    ``batch_size`` times.

    Returns:
        ``(q_next, [diagnostics per sample])``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    diags = []
    dmu = np.zeros(q.dim)
    dsigma = np.zeros((q.dim, q.dim))
    for _ in range(batch_size):
        theta = gaussian_sample(q, rng)
        g = np.asarray(model.grad_log_density(theta), dtype=float)
        _, diag = gsm_update(q, theta, g, jitter=jitter)
        dmu += diag.delta_mu
        dsigma += diag.delta_sigma
        diags.append(diag)
    if not np.any(dmu) and not np.any(dsigma):
        return q, diags
    try:
        q_next = GaussianParams.from_moments(
            q.mean + dmu / batch_size, q.covariance + dsigma / batch_size, jitter=jitter
        )
    except LostPositiveDefiniteError as exc:
        raise LostPositiveDefiniteError(str(exc), diagnostics=diags) from exc
    return q_next, diags


def run_gsm(model, config, monitor=None, monitor_every=1, update_hook=None, run_id=0,
            algorithm="gsm"):
    """Run ``config.iterations`` batched GSM iterations.

    Args:
        model: target exposing ``dim`` and ``grad_log_density``.
        config: a :class:`GsmConfig`; ``init=None`` means ``N(0, I)``.
        monitor: callable ``q -> float`` with a ``name`` attribute. Defaults
            to a negative-ELBO monitor on a stream split off ``config.seed``.
        monitor_every: record a trace row every this many iterations (the
            last iteration is always recorded).
        update_hook: optional ``hook(q_before, q_after, diags)`` called after
            every iteration.

    Returns:
        ``(q_final, trace)``.

    Raises:
        RunAborted: an update failed; ``.trace`` carries the partial trace.
    """
    if monitor_every < 1:
        raise ValueError("monitor_every must be >= 1")
    q = config.init if config.init is not None else GaussianParams.standard(model.dim)
    if q.dim != model.dim:
        raise ValueError(f"init has dimension {q.dim}, model has {model.dim}")
    if monitor is None:
        monitor = NegElboMonitor(model, seed=config.seed ^ METRIC_STREAM_XOR)
    rng = np.random.default_rng(config.seed)
    B = config.batch_size
    trace = []
    for it in range(1, config.iterations + 1):
        try:
            q_next, diags = gsm_step(q, model, B, rng)
        except Exception as exc:
            raise RunAborted(f"GSM update failed at iteration {it}: {exc}", trace, exc) from exc
        if update_hook is not None:
            update_hook(q, q_next, diags)
        q = q_next
        if it % monitor_every == 0 or it == config.iterations:
            trace.append(TraceRecord(it, it * B, monitor.name, float(monitor(q)), run_id, algorithm))
    return q, trace
