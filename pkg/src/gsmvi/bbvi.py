"""Reparameterization BBVI with ADAM over a full-rank Gaussian.

The Gaussian is parameterized without constraints by its mean and a lower
triangular factor whose diagonal is stored on the log scale. Parameters are
flattened as ``[mean, tril(L_unconstrained)]`` with the triangle in
``np.tril_indices`` (row-major) order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gaussian import LOG_2PI, GaussianParams, gaussian_log_density, gaussian_score
from .gsm import RunAborted
from .metrics import METRIC_STREAM_XOR, NegElboMonitor, TraceRecord

ENTROPY_MODES = ("analytic", "sample")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, message, sample):
        super().__init__(message)
        self.sample = sample


@dataclass(frozen=True, eq=False)
class BbviParams:
    mean: np.ndarray
    chol_unconstrained: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        raw = np.tril(np.array(self.chol_unconstrained, dtype=float))
        d = mean.shape[0]
        if mean.ndim != 1 or raw.shape != (d, d):
            raise ValueError("mean must be (d,) and chol_unconstrained (d, d)")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol_unconstrained", raw)

    @property
    def dim(self):
        return self.mean.shape[0]

    @classmethod
    def encode(cls, q):
        raw = np.array(q.chol, dtype=float)
        idx = np.diag_indices(q.dim)
        raw[idx] = np.log(raw[idx])
        return cls(q.mean, raw)

    def chol(self):
        L = self.chol_unconstrained.copy()
        idx = np.diag_indices(self.dim)
        L[idx] = np.exp(L[idx])
        return L

    def decode(self):
        return GaussianParams.from_chol(self.mean, self.chol())

    def flatten(self):
        rows, cols = np.tril_indices(self.dim)
        return np.concatenate([self.mean, self.chol_unconstrained[rows, cols]])

    @classmethod
    def unflatten(cls, flat, dim):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (num_params(dim),):
            raise ValueError(f"expected {num_params(dim)} parameters, got {flat.shape}")
        raw = np.zeros((dim, dim))
        raw[np.tril_indices(dim)] = flat[dim:]
        return cls(flat[:dim], raw)


def num_params(dim):
    return dim + dim * (dim + 1) // 2


@dataclass(frozen=True)
class BbviConfig:
    iterations: int
    batch_size: int = 2
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    init: GaussianParams | None = None
    seed: int = 0
    entropy: str = "analytic"

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1e-6 <= self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must lie in [1e-6, 1], got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")
        if self.entropy not in ENTROPY_MODES:
            raise ValueError(f"entropy must be one of {ENTROPY_MODES}")


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def gaussian_entropy(q):
    return 0.5 * q.log_det() + 0.5 * q.dim * (1.0 + LOG_2PI)


def elbo_estimate(w, model, samples):
    """Mean over ``samples`` of ``log p(theta) - log q_w(theta)``.

    ``w`` may be :class:`BbviParams` or :class:`GaussianParams`.
    """
    q = w.decode() if isinstance(w, BbviParams) else w
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("elbo_estimate needs at least one sample")
    log_p = np.asarray(model.log_density(samples), dtype=float)
    if not np.all(np.isfinite(log_p)):
        raise FloatingPointError("model returned a non-finite log density")
    return float(np.mean(log_p - gaussian_log_density(q, samples)))


def elbo_objective(flat, model, z, entropy="analytic"):
    """Reparameterized ELBO at fixed standard-normal draws ``z`` (shape ``(B, d)``)."""
    z = np.atleast_2d(z)
    w = BbviParams.unflatten(flat, z.shape[1])
    q = w.decode()
    theta = q.mean + z @ q.chol.T
    log_p = np.asarray(model.log_density(theta), dtype=float)
    if entropy == "analytic":
        return float(np.mean(log_p)) + gaussian_entropy(q)
    return float(np.mean(log_p - gaussian_log_density(q, theta)))


def _check_grads(g, theta):
    bad = ~np.all(np.isfinite(g), axis=1)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise NonFiniteGradientError(f"non-finite model gradient at sample {j}", theta[j])


def elbo_gradient(w, model, batch_size, rng, entropy="analytic", return_samples=False):
    """Reparameterization gradient of the ELBO w.r.t. the flat parameters.

    Draws ``z`` of shape ``(batch_size, d)`` from ``rng`` and evaluates the
    model gradient once per draw.

    With ``entropy="sample"`` the entropy term is the per-draw ``-log q``
    differentiated along the sampling path; its gradient coincides with the
    analytic one, only the reported objective differs.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if entropy not in ENTROPY_MODES:
        raise ValueError(f"entropy must be one of {ENTROPY_MODES}")
    d = w.dim
    L = w.chol()
    z = rng.standard_normal((batch_size, d))
    theta = w.mean + z @ L.T
    g = np.asarray(model.grad_log_density(theta), dtype=float).reshape(batch_size, d)
    _check_grads(g, theta)

    grad_mu = g.mean(axis=0)
    grad_L = np.tril(g.T @ z) / batch_size
    inv_diag = 1.0 / np.diag(L)
    if entropy == "analytic":
        grad_L[np.diag_indices(d)] += inv_diag
    else:
        q = GaussianParams.from_chol(w.mean, L)
        s = gaussian_score(q, theta)  # grad_theta log q = -L^{-T} z
        # path term of -log q plus its explicit dependence on (mean, L)
        grad_mu += (-s).mean(axis=0) + s.mean(axis=0)
        path = np.tril((-s).T @ z) / batch_size
        explicit = np.tril(s.T @ z) / batch_size
        grad_L += path + explicit
        grad_L[np.diag_indices(d)] += inv_diag

    # chain rule through L_ii = exp(l_ii)
    grad_raw = grad_L
    grad_raw[np.diag_indices(d)] *= np.diag(L)
    rows, cols = np.tril_indices(d)
    flat = np.concatenate([grad_mu, grad_raw[rows, cols]])
    if return_samples:
        return flat, z
    return flat


def adam_step(params, grad, state, config):
    """One ADAM ascent step (bias-corrected moments)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step_count + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params + config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return new, AdamState(m, v, t)


def run_bbvi(model, config, monitor=None, monitor_every=1, run_id=0, algorithm="bbvi"):
    """Maximize the ELBO for ``config.iterations`` ADAM steps.

    Returns:
        ``(q_final, trace)`` with ``q_final`` the decoded Gaussian.

    Raises:
        RunAborted: non-finite parameters or gradients; ``.trace`` holds the
            partial trace.
    """
    if monitor_every < 1:
        raise ValueError("monitor_every must be >= 1")
    init = config.init if config.init is not None else GaussianParams.standard(model.dim)
    if init.dim != model.dim:
        raise ValueError(f"init has dimension {init.dim}, model has {model.dim}")
    if monitor is None:
        monitor = NegElboMonitor(model, seed=config.seed ^ METRIC_STREAM_XOR)
    d = model.dim
    rng = np.random.default_rng(config.seed)
    w = BbviParams.encode(init)
    flat = w.flatten()
    state = AdamState.zeros(flat.shape[0])
    B = config.batch_size
    q = init
    trace = []
    for it in range(1, config.iterations + 1):
        try:
            grad = elbo_gradient(w, model, B, rng, entropy=config.entropy)
            flat, state = adam_step(flat, grad, state, config)
            if not np.all(np.isfinite(flat)):
                raise FloatingPointError("non-finite variational parameters")
            w = BbviParams.unflatten(flat, d)
            q = w.decode()
        except Exception as exc:
            raise RunAborted(f"BBVI failed at iteration {it}: {exc}", trace, exc) from exc
        if it % monitor_every == 0 or it == config.iterations:
            trace.append(TraceRecord(it, it * B, monitor.name, float(monitor(q)), run_id, algorithm))
    return q, trace


def with_learning_rate(config, lr):
    return replace(config, learning_rate=lr)
