"""
Fitting a model written in the expression language
==================================================

A log joint can be given as text. Here it is a mildly curved two-dimensional
density: theta0 ~ N(0, 1) and theta1 | theta0 ~ N(0.5 * theta0^2, 0.5).
The gradient comes from the expression itself, so nothing else is needed.
"""

import numpy as np

from gsmvi import GsmConfig, NegElboMonitor, make_dsl_target, run_gsm
from gsmvi.dsl import differentiate, parse, to_source

program = "-0.5*theta[0]^2 - (theta[1] - 0.5*theta[0]^2)^2"
target = make_dsl_target(program, dim=2)

print("parsed:", to_source(parse(program, 2)))
print("gradient at (1, 1):", differentiate(parse(program, 2), [1.0, 1.0]))

###############################################################################
# The normalizer is unknown, so progress is tracked with the negative ELBO,
# which is KL(q || p) up to the missing log normalizer. The target is not
# Gaussian, so the iterates settle into a noisy neighbourhood of the best
# fit; a larger batch shrinks that noise.

monitor = NegElboMonitor(target, seed=99, batch_size=500)
q, trace = run_gsm(target, GsmConfig(iterations=300, batch_size=8, seed=0),
                   monitor=monitor, monitor_every=50)
for rec in trace:
    print(f"evals {rec.grad_evals:4d}  neg_elbo {rec.value:8.4f}")

print("fitted mean:", np.round(q.mean, 3))
print("fitted covariance:\n", np.round(q.covariance, 3))
