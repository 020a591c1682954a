import math

import numpy as np
import pytest

from conftest import random_gaussian
from oracles import project_1d, project_penalty
from gsmvi.gaussian import GaussianParams, LostPositiveDefiniteError, gaussian_sample, gaussian_score
from gsmvi.gsm import (
    GsmConfig,
    RunAborted,
    gsm_step,
    gsm_update,
    mean_step_matrix,
    positive_root,
    run_gsm,
    solve_rho,
)
from gsmvi.metrics import FklMonitor, ReferenceSampleSet
from gsmvi.targets import GaussianTarget, GaussianTargetSpec, make_gaussian_target


def random_instance(rng, d):
    q0 = random_gaussian(rng, d)
    theta = gaussian_sample(q0, rng)
    g = rng.standard_normal(d)
    return q0, theta, g


# ---------------------------------------------------------------- rho

@pytest.mark.parametrize("r, rho", [(0.0, 0.0), (2.0, 1.0), (6.0, 2.0)])
def test_positive_root_examples(r, rho):
    assert positive_root(r) == pytest.approx(rho, abs=1e-15)


def test_positive_root_residual():
    for r in np.concatenate([[0.0, 1e-300, 1e-12, 1e-9, 1e-8], np.logspace(-8, 12, 300)]):
        rho = positive_root(r)
        assert rho >= 0.0
        assert abs(rho * (1.0 + rho) - r) <= 1e-10 * (1.0 + r)


def test_positive_root_small_r_branch_has_full_precision():
    r = 1e-12
    assert positive_root(r) == pytest.approx(r - r * r, rel=1e-14)


def test_positive_root_rejects_nonfinite():
    with pytest.raises(ValueError):
        positive_root(math.inf)
    with pytest.raises(ValueError):
        positive_root(math.nan)


def test_solve_rho_zero_gradient():
    q0 = GaussianParams.standard(3)
    assert solve_rho(np.zeros(3), q0, np.ones(3)) == 0.0


# ---------------------------------------------------------------- single update

def test_update_noop_when_scores_match():
    q0 = GaussianParams.standard(1)
    q, diag = gsm_update(q0, np.array([1.0]), np.array([-1.0]))
    assert q is q0
    np.testing.assert_array_equal(diag.epsilon0, [0.0])
    np.testing.assert_array_equal(diag.delta_mu, [0.0])


def test_update_zero_gradient_example():
    q0 = GaussianParams.from_moments([1.0], [[1.0]])
    q, diag = gsm_update(q0, np.array([0.0]), np.array([0.0]))
    assert diag.rho == 0.0
    np.testing.assert_allclose(diag.epsilon0, [-1.0])
    np.testing.assert_allclose(q.mean, [0.0], atol=1e-15)
    np.testing.assert_allclose(q.covariance, [[2.0]], atol=1e-15)
    m, v = project_1d(1.0, 1.0, 0.0, 0.0)
    assert m == pytest.approx(0.0, abs=1e-6) and v == pytest.approx(2.0, abs=1e-6)


def test_update_worked_example():
    q0 = GaussianParams.from_moments([0.0], [[4.0]])
    q, diag = gsm_update(q0, np.array([2.0]), np.array([-2.0]))
    assert diag.rho == pytest.approx((math.sqrt(129.0) - 1.0) / 2.0, rel=1e-14)
    assert diag.rho == pytest.approx(5.178908, abs=1e-6)
    assert q.mean[0] == pytest.approx(-0.58945, abs=1e-5)
    assert q.covariance[0, 0] == pytest.approx(1.29472, abs=1e-5)
    assert (2.0 - q.mean[0]) / q.covariance[0, 0] == pytest.approx(2.0, rel=1e-12)
    m, v = project_1d(0.0, 4.0, 2.0, -2.0)
    assert abs(m - q.mean[0]) <= 1e-6 and abs(v - q.covariance[0, 0]) <= 1e-6


def test_update_constraint_and_rho_identity(rng):
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        q0, theta, g = random_instance(rng, d)
        q, diag = gsm_update(q0, theta, g)
        assert diag.constraint_residual / (1.0 + np.max(np.abs(g))) <= 1e-8
        np.testing.assert_allclose(gaussian_score(q, theta), g, atol=1e-8 * (1 + np.max(np.abs(g))))
        assert (q.mean - theta) @ g == pytest.approx(diag.rho, rel=1e-8, abs=1e-300)


def test_update_preserves_pd_and_eigen_bound(rng):
    for _ in range(500):
        d = int(rng.integers(1, 9))
        q0, theta, g = random_instance(rng, d)
        q, diag = gsm_update(q0, theta, g)
        lam, vecs = np.linalg.eigh(q.covariance)
        assert lam.min() > 0
        proj = vecs.T @ g
        mask = np.abs(proj) > 1e-8
        assert np.all(lam[mask] <= diag.rho / proj[mask] ** 2 + 1e-8)


def test_eps0_form_matches_score_difference_form(rng):
    for _ in range(200):
        d = int(rng.integers(1, 7))
        q0, theta, g = random_instance(rng, d)
        _, diag = gsm_update(q0, theta, g)
        A = mean_step_matrix(q0, theta, g, diag.rho)
        via_a = A @ (g - gaussian_score(q0, theta))
        np.testing.assert_allclose(diag.delta_mu, via_a, rtol=0,
                                   atol=1e-10 * (1 + np.max(np.abs(via_a))))


def test_eps0_equals_cov_times_score_gap(rng):
    q0, theta, g = random_instance(rng, 4)
    _, diag = gsm_update(q0, theta, g)
    np.testing.assert_allclose(diag.epsilon0, q0.covariance @ (g - gaussian_score(q0, theta)),
                               atol=1e-10)


def test_update_at_mean_is_well_defined(rng):
    q0 = random_gaussian(rng, 3)
    g = rng.standard_normal(3)
    q, diag = gsm_update(q0, q0.mean.copy(), g)
    np.testing.assert_allclose(diag.epsilon0, q0.covariance @ g, rtol=1e-14)
    assert np.all(np.isfinite(q.mean))
    assert diag.constraint_residual <= 1e-8 * (1 + np.max(np.abs(g)))


def test_update_rejects_bad_inputs():
    q0 = GaussianParams.standard(2)
    with pytest.raises(ValueError):
        gsm_update(q0, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        gsm_update(q0, np.zeros(2), np.array([np.inf, 0.0]))


def test_delta_sigma_symmetric(rng):
    q0, theta, g = random_instance(rng, 5)
    _, diag = gsm_update(q0, theta, g)
    np.testing.assert_array_equal(diag.delta_sigma, diag.delta_sigma.T)


def test_lost_pd_error_carries_diagnostics(monkeypatch, rng):
    import gsmvi.gsm as gsm_mod

    def broken(*args, **kwargs):
        raise LostPositiveDefiniteError("forced")

    q0, theta, g = random_instance(rng, 2)
    monkeypatch.setattr(gsm_mod.GaussianParams, "from_moments", broken)
    with pytest.raises(LostPositiveDefiniteError) as info:
        gsm_update(q0, theta, g)
    assert info.value.diagnostics is not None
    assert info.value.diagnostics.rho > 0


# ---------------------------------------------------------------- KL minimality

def test_kl_minimality_1d_golden_section(rng):
    for _ in range(200):
        m0 = rng.standard_normal()
        v0 = rng.uniform(0.1, 10.0)
        theta = m0 + math.sqrt(v0) * rng.standard_normal()
        g = rng.standard_normal()
        q, _ = gsm_update(GaussianParams.from_moments([m0], [[v0]]), np.array([theta]), np.array([g]))
        m, v = project_1d(m0, v0, theta, g)
        assert abs(m - q.mean[0]) <= 1e-6
        assert abs(v - q.covariance[0, 0]) <= 1e-6


def test_kl_minimality_penalty_method(rng):
    for _ in range(10):
        d = int(rng.integers(2, 4))
        q0, theta, g = random_instance(rng, d)
        q, _ = gsm_update(q0, theta, g)
        mu, cov = project_penalty(q0.mean, q0.covariance, theta, g)
        np.testing.assert_allclose(mu, q.mean, atol=1e-4)
        np.testing.assert_allclose(cov, q.covariance, atol=1e-4)


# ---------------------------------------------------------------- batched step

class CountingModel:
    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim
        self.calls = 0

    def grad_log_density(self, theta):
        self.calls += 1
        return self.inner.grad_log_density(theta)


def test_step_b1_equals_single_update(rng):
    q = random_gaussian(rng, 3)
    target = GaussianTarget(random_gaussian(rng, 3))
    q_step, diags = gsm_step(q, target, 1, np.random.default_rng(5))
    theta = gaussian_sample(q, np.random.default_rng(5))
    q_upd, _ = gsm_update(q, theta, target.grad_log_density(theta))
    np.testing.assert_array_equal(q_step.mean, q_upd.mean)
    np.testing.assert_array_equal(q_step.covariance, q_upd.covariance)
    assert len(diags) == 1


def test_step_fixed_point_when_target_equals_q(rng):
    q = random_gaussian(rng, 4)
    model = GaussianTarget(q)
    q_next, diags = gsm_step(q, model, 3, rng)
    np.testing.assert_allclose(q_next.mean, q.mean, atol=1e-12)
    np.testing.assert_allclose(q_next.covariance, q.covariance, atol=1e-12)
    for diag in diags:
        assert np.max(np.abs(diag.delta_mu)) <= 1e-12


def test_step_batch_replay(rng):
    q = random_gaussian(rng, 2)
    target = make_gaussian_target(GaussianTargetSpec(2, 10.0, seed=3))
    model = CountingModel(target)
    q_next, diags = gsm_step(q, model, 2, np.random.default_rng(99))
    assert model.calls == 2
    # replay with the recorded samples
    singles = [gsm_update(q, d.theta, target.grad_log_density(d.theta))[0] for d in diags]
    np.testing.assert_allclose(q_next.mean, np.mean([s.mean for s in singles], axis=0), atol=1e-13)
    np.testing.assert_allclose(q_next.covariance,
                               np.mean([s.covariance for s in singles], axis=0), atol=1e-13)
    assert np.linalg.eigvalsh(q_next.covariance).min() > 0


def test_step_uses_per_sample_mean_for_covariance(rng):
    q = random_gaussian(rng, 2)
    target = make_gaussian_target(GaussianTargetSpec(2, 5.0, seed=1))
    _, diags = gsm_step(q, target, 2, np.random.default_rng(1))
    for d in diags:
        u = q.mean - d.theta
        v = q.mean + d.delta_mu - d.theta
        np.testing.assert_allclose(d.delta_sigma, np.outer(u, u) - np.outer(v, v), atol=1e-13)


def test_step_rejects_zero_batch(rng):
    with pytest.raises(ValueError):
        gsm_step(GaussianParams.standard(1), GaussianTarget(GaussianParams.standard(1)), 0, rng)


# ---------------------------------------------------------------- run loop

def test_config_validation():
    with pytest.raises(ValueError):
        GsmConfig(iterations=0)
    with pytest.raises(ValueError):
        GsmConfig(iterations=1, batch_size=0)
    assert GsmConfig(iterations=3).batch_size == 2


def test_run_accounting():
    target = GaussianTarget(GaussianParams.standard(2))
    model = CountingModel(target)
    model.log_density = target.log_density
    _, trace = run_gsm(model, GsmConfig(1, 1, seed=0))
    assert model.calls == 1
    assert len(trace) == 1 and trace[0].iteration == 1 and trace[0].grad_evals == 1


def test_run_fixed_point_fkl_stays_zero():
    target = GaussianTarget(GaussianParams.standard(1))
    refs = ReferenceSampleSet.generate(target, seed=0)
    _, trace = run_gsm(target, GsmConfig(50, 2, init=GaussianParams.standard(1), seed=4),
                       monitor=FklMonitor(refs, target))
    assert all(abs(r.value) <= 1e-10 for r in trace)


def test_run_is_deterministic():
    target = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=2))
    a_q, a = run_gsm(target, GsmConfig(20, 2, seed=8))
    b_q, b = run_gsm(target, GsmConfig(20, 2, seed=8))
    assert a == b
    np.testing.assert_array_equal(a_q.covariance, b_q.covariance)


def test_run_monitor_cadence():
    target = make_gaussian_target(GaussianTargetSpec(2, 1.0, seed=2))
    _, trace = run_gsm(target, GsmConfig(10, 2, seed=0), monitor_every=4)
    assert [r.iteration for r in trace] == [4, 8, 10]
    assert [r.grad_evals for r in trace] == [8, 16, 20]


def test_run_monitoring_does_not_change_trajectory():
    target = make_gaussian_target(GaussianTargetSpec(3, 10.0, seed=2))
    q1, _ = run_gsm(target, GsmConfig(15, 2, seed=1), monitor_every=1)
    q2, _ = run_gsm(target, GsmConfig(15, 2, seed=1), monitor_every=15)
    np.testing.assert_array_equal(q1.mean, q2.mean)


def test_run_aborts_with_partial_trace():
    class Exploding(GaussianTarget):
        calls = 0

        def grad_log_density(self, theta):
            Exploding.calls += 1
            if Exploding.calls > 4:
                return np.full(self.dim, np.nan)
            return super().grad_log_density(theta)

    model = Exploding(GaussianParams.standard(2))
    with pytest.raises(RunAborted) as info:
        run_gsm(model, GsmConfig(10, 2, seed=0))
    assert len(info.value.trace) == 2


def test_run_converges_on_d10_gaussian():
    target = make_gaussian_target(GaussianTargetSpec(10, 1.0, seed=0))
    refs = ReferenceSampleSet.generate(target, seed=1)
    monitor = FklMonitor(refs, target)
    _, trace = run_gsm(target, GsmConfig(2500, 2, seed=0), monitor=monitor)
    assert trace[-1].grad_evals <= 5000
    assert trace[-1].value <= 1e-3
