"""Gaussian score-matching variational inference and a BBVI baseline."""

from .bbvi import BbviConfig, BbviParams, run_bbvi
from .gaussian import (
    GaussianParams,
    LostPositiveDefiniteError,
    gaussian_kl,
    gaussian_log_density,
    gaussian_sample,
    gaussian_score,
)
from .gsm import GsmConfig, GsmUpdateDiagnostics, RunAborted, gsm_step, gsm_update, run_gsm, solve_rho
from .metrics import (
    FklMonitor,
    NegElboMonitor,
    ReferenceSampleSet,
    TraceRecord,
    first_crossing,
    forward_kl_mean,
)
from .targets import (
    GaussianTargetSpec,
    SinhArcsinhSpec,
    TargetModel,
    make_dsl_target,
    make_gaussian_target,
    make_sinh_arcsinh_target,
)

__version__ = "0.1.0"
