"""Fit-quality metrics recorded along optimization runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import gaussian_kl, gaussian_log_density, gaussian_sample

# Metric RNG streams are seeded with ``run_seed ^ METRIC_STREAM_XOR`` so that
# monitoring never draws from the optimizer's stream.
METRIC_STREAM_XOR = 0x9E3779B97F4A7C15

METRICS = ("fkl_mean", "neg_elbo", "kl_gauss_exact")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    grad_evals: int
    metric: str
    value: float
    run_id: int = 0
    algorithm: str = ""


class UnnormalizedTargetError(ValueError):
    """Forward KL needs a normalized target log density."""


@dataclass(frozen=True, eq=False)
class ReferenceSampleSet:
    """Fixed draws from a target, reused for every FKL evaluation."""

    samples: np.ndarray
    generator_seed: int
    target_id: str = ""

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2:
            raise ValueError("reference samples must be a 2-D array")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def generate(cls, target, seed, n=1000, target_id=""):
        if target.sample is None:
            raise ValueError("target has no exact sampler")
        rng = np.random.default_rng(seed)
        return cls(target.sample(rng, n), seed, target_id)

    @property
    def dim(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]


def _check_fkl_inputs(refs, target, q):
    if not target.normalizer_known:
        raise UnnormalizedTargetError("forward KL requires a normalized target density")
    if refs.dim != target.dim or q.dim != target.dim:
        raise ValueError(
            f"dimension mismatch: refs {refs.dim}, target {target.dim}, q {q.dim}"
        )


def forward_kl_terms(refs, target, q):
    """Per-sample ``log p(x) - log q(x)`` over the reference set."""
    _check_fkl_inputs(refs, target, q)
    return target.log_density(refs.samples) - gaussian_log_density(q, refs.samples)


def forward_kl_mean(refs, target, q):
    """Monte-Carlo forward KL(p || q): mean of ``log p - log q`` over ``refs``."""
    return float(np.mean(forward_kl_terms(refs, target, q)))


def neg_elbo_metric(q, model, batch_size, rng):
    """``-ELBO`` of ``q`` estimated from ``batch_size`` fresh draws of ``rng``."""
    from .bbvi import elbo_estimate

    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    samples = gaussian_sample(q, rng, size=batch_size)
    return -elbo_estimate(q, model, samples)


class FklMonitor:
    """``q -> fkl_mean`` with target log densities cached once."""

    name = "fkl_mean"

    def __init__(self, refs, target):
        if not target.normalizer_known:
            raise UnnormalizedTargetError("forward KL requires a normalized target density")
        if refs.dim != target.dim:
            raise ValueError("reference samples and target disagree on dimension")
        self.refs = refs
        self._log_p = np.asarray(target.log_density(refs.samples), dtype=float)

    def __call__(self, q):
        return float(np.mean(self._log_p - gaussian_log_density(q, self.refs.samples)))


class NegElboMonitor:
    """``q -> -ELBO`` on its own RNG stream."""

    name = "neg_elbo"

    def __init__(self, model, seed, batch_size=100):
        self.model = model
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def __call__(self, q):
        return neg_elbo_metric(q, self.model, self.batch_size, self.rng)


class ExactKlMonitor:
    """``q -> KL(p || q)`` in closed form for a Gaussian target."""

    name = "kl_gauss_exact"

    def __init__(self, target_params):
        self.target_params = target_params

    def __call__(self, q):
        return gaussian_kl(self.target_params, q)


def first_crossing(trace, threshold):
    """Gradient evaluations at the first record with ``value <= threshold``.

    Returns ``inf`` if the trace never crosses.
    """
    for rec in trace:
        if rec.value <= threshold:
            return rec.grad_evals
    return float("inf")
