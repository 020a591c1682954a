"""
One score-matching update, by hand
==================================

A Gaussian q = N(0, 4) sees a single sample theta = 2 at which the target
score is g = -2. The update moves q to the closest Gaussian (in KL) whose
own score at theta equals g.
"""

import numpy as np

from gsmvi import GaussianParams, gaussian_score, gsm_update

q0 = GaussianParams.from_moments([0.0], [[4.0]])
theta = np.array([2.0])
g = np.array([-2.0])

# Before the update, q's score at theta is -0.5, not -2.
print("score of q0 at theta:", gaussian_score(q0, theta))

q1, diag = gsm_update(q0, theta, g)
print(f"rho               = {diag.rho:.6f}")
print(f"new mean          = {q1.mean[0]:.5f}")
print(f"new variance      = {q1.covariance[0, 0]:.5f}")
print("score of q1 at theta:", gaussian_score(q1, theta))

###############################################################################
# The match is exact up to rounding, and rho equals (mu_new - theta) . g.

print("constraint residual:", diag.constraint_residual)
print("rho check:", float((q1.mean - theta) @ g))

###############################################################################
# In higher dimension the same call works unchanged. The covariance stays
# positive definite, and every eigenvalue obeys lambda <= rho / (e'g)^2.

rng = np.random.default_rng(0)
a = rng.standard_normal((5, 5))
q0 = GaussianParams.from_moments(rng.standard_normal(5), a @ a.T + np.eye(5))
theta = rng.standard_normal(5)
g = rng.standard_normal(5)
q1, diag = gsm_update(q0, theta, g)
lam, vecs = np.linalg.eigh(q1.covariance)
print("eigenvalues:", np.round(lam, 4))
print("bounds:     ", np.round(diag.rho / (vecs.T @ g) ** 2, 4))
