import math

import numpy as np
import pytest

from conftest import random_gaussian
from gsmvi.bbvi import BbviConfig, run_bbvi
from gsmvi.gaussian import GaussianParams, gaussian_kl
from gsmvi.gsm import GsmConfig, run_gsm
from gsmvi.metrics import (
    METRIC_STREAM_XOR,
    ExactKlMonitor,
    FklMonitor,
    NegElboMonitor,
    ReferenceSampleSet,
    TraceRecord,
    UnnormalizedTargetError,
    first_crossing,
    forward_kl_mean,
    forward_kl_terms,
    neg_elbo_metric,
)
from gsmvi.targets import GaussianTarget, GaussianTargetSpec, make_dsl_target, make_gaussian_target


def test_reference_set_is_reproducible():
    target = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=0))
    a = ReferenceSampleSet.generate(target, seed=5, target_id="g")
    b = ReferenceSampleSet.generate(target, seed=5, target_id="g")
    np.testing.assert_array_equal(a.samples, b.samples)
    assert len(a) == 1000 and a.dim == 3 and a.generator_seed == 5
    with pytest.raises(ValueError):
        a.samples[0, 0] = 1.0


def test_reference_set_needs_sampler():
    with pytest.raises(ValueError):
        ReferenceSampleSet.generate(make_dsl_target("-0.5*dot(theta,theta)", 2), seed=0)


def test_fkl_zero_when_q_is_target():
    target = make_gaussian_target(GaussianTargetSpec(4, 100.0, seed=1))
    refs = ReferenceSampleSet.generate(target, seed=2)
    assert np.all(forward_kl_terms(refs, target, target.params) == 0.0)
    assert forward_kl_mean(refs, target, target.params) == 0.0


def test_fkl_matches_analytic_example():
    target = GaussianTarget(GaussianParams.standard(1))
    q = GaussianParams.from_moments([0.0], [[4.0]])
    refs = ReferenceSampleSet.generate(target, seed=3)
    terms = forward_kl_terms(refs, target, q)
    se = terms.std(ddof=1) / math.sqrt(len(terms))
    exact = 0.5 * (0.25 + math.log(4.0) - 1.0)
    assert exact == pytest.approx(0.3181, abs=1e-4)
    assert abs(terms.mean() - exact) <= 3.0 * se


def test_fkl_deterministic():
    target = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=1))
    refs = ReferenceSampleSet.generate(target, seed=2)
    q = GaussianParams.standard(3)
    assert forward_kl_mean(refs, target, q) == forward_kl_mean(refs, target, q)
    assert FklMonitor(refs, target)(q) == forward_kl_mean(refs, target, q)


def test_fkl_tracks_exact_kl(rng):
    target = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=6))
    refs = ReferenceSampleSet.generate(target, seed=7)
    for _ in range(100):
        q = random_gaussian(rng, 3, lo=0.05, hi=3.0)
        terms = forward_kl_terms(refs, target, q)
        se = terms.std(ddof=1) / math.sqrt(len(terms))
        exact = gaussian_kl(target.params, q)
        assert abs(terms.mean() - exact) <= 3.0 * se + 1e-12
        assert terms.mean() >= -3.0 * se


def test_fkl_errors():
    refs = ReferenceSampleSet(np.zeros((4, 2)), 0)
    with pytest.raises(UnnormalizedTargetError):
        forward_kl_mean(refs, make_dsl_target("-0.5*dot(theta,theta)", 2), GaussianParams.standard(2))
    with pytest.raises(UnnormalizedTargetError):
        FklMonitor(refs, make_dsl_target("-0.5*dot(theta,theta)", 2))
    with pytest.raises(ValueError):
        forward_kl_mean(refs, GaussianTarget(GaussianParams.standard(2)), GaussianParams.standard(3))


def test_neg_elbo_examples():
    q = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=1)).params
    assert neg_elbo_metric(q, GaussianTarget(q), 10, np.random.default_rng(0)) == pytest.approx(0.0, abs=1e-12)
    model = GaussianTarget(GaussianParams.standard(1))
    good = neg_elbo_metric(GaussianParams.standard(1), model, 1000, np.random.default_rng(4))
    bad = neg_elbo_metric(GaussianParams.from_moments([5.0], [[1.0]]), model, 1000,
                          np.random.default_rng(4))
    assert good <= bad
    assert bad == pytest.approx(12.5, rel=0.05)
    with pytest.raises(ValueError):
        neg_elbo_metric(q, model, 0, np.random.default_rng(0))


def test_exact_kl_monitor():
    p = GaussianParams.standard(1)
    assert ExactKlMonitor(p)(GaussianParams.from_moments([1.0], [[1.0]])) == pytest.approx(0.5)


def test_monitoring_leaves_trajectories_unchanged():
    target = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=2))

    class Silent:
        name = "neg_elbo"

        def __call__(self, q):
            return 0.0

    for run, config in [(run_gsm, GsmConfig(30, 2, seed=9)), (run_bbvi, BbviConfig(30, 2, seed=9))]:
        q_on, _ = run(target, config, monitor=NegElboMonitor(target, 9 ^ METRIC_STREAM_XOR))
        q_off, _ = run(target, config, monitor=Silent())
        np.testing.assert_array_equal(q_on.mean, q_off.mean)
        np.testing.assert_array_equal(q_on.covariance, q_off.covariance)


def test_grad_evals_nondecreasing():
    target = make_gaussian_target(GaussianTargetSpec(2, 10.0, seed=2))
    _, trace = run_gsm(target, GsmConfig(25, 3, seed=0), monitor_every=3)
    evals = [r.grad_evals for r in trace]
    assert evals == sorted(evals)
    assert all(r.grad_evals == 3 * r.iteration for r in trace)


def test_first_crossing():
    trace = [TraceRecord(i, 2 * i, "fkl_mean", v) for i, v in enumerate([5.0, 1.0, 0.5, 0.01, 0.2], 1)]
    assert first_crossing(trace, 0.5) == 6
    assert first_crossing(trace, 1e-3) == math.inf
