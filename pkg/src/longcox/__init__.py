"""Estimation of the association between an intermittently measured,
error-prone time-varying exposure and a right-censored event time.

Five estimation strategies (LOCF, regression calibration with and without
post-event information, multiple imputation, joint model) over a shared
longitudinal-survival data model, plus a Monte Carlo study harness.
"""

from .numerics import (
    BracketError,
    CholeskyError,
    OptimResult,
    RngStream,
    SpdMatrix,
    brent_root,
    cholesky,
    draw_normal,
    gauss_hermite,
    maximize,
)
from .data_model import (
    Cohort,
    ExposurePath,
    SubjectRecord,
    TimeBasis,
    Visit,
    evaluate_basis,
    read_cohort,
    truncate_at_event,
    write_cohort,
)
from .survival import (
    CoxFit,
    ParametricBaseline,
    StepFunction,
    cumulative_hazard,
    fit_cox,
    nelson_aalen,
)
from .lmm import LmmFit, LmmSpec, blup, fit_lmm, marginal_loglik, posterior_draw, predict_exposure
from .simulate import GeneratedTruth, ScenarioConfig, generate, preset
from .jm import JmFit, fit_joint_model
from .estimators import (
    EstimateResult,
    bootstrap_variance,
    estimate_jm,
    estimate_locf,
    estimate_mi,
    estimate_rc,
    rubin_pool,
)
from .study import StudyConfig, StudyReport, compute_metrics, emit_report, run_study

__version__ = "0.1.0"
