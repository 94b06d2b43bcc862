"""The five estimation pipelines.

Every pipeline returns an :class:`EstimateResult` whose 95% CI is
``gamma_hat +/- 1.959964 * se_total``:

* ``locf``  -- step-function exposure, model-based SE (stage-1 uncertainty
  is ignored by construction).
* ``rc`` / ``pe_rc`` -- two-stage regression calibration on BLUP-predicted
  paths, total SE from a parametric bootstrap of the stage-1 parameters.
* ``mi``   -- multiple imputation with event-informed stage 1 (Nelson-Aalen
  cumulative hazard at the event time and a last-visit indicator), posterior
  draws of parameters and random effects, Rubin pooling.
* ``jm``   -- joint model, SE from the inverse Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data_model import Cohort, ExposurePath, SubjectRecord, evaluate_basis, step_path, truncate_at_event
from .jm import JmError, JmFit, fit_joint_model
from .lmm import (
    ExtraRegressor,
    LmmError,
    LmmFit,
    LmmSpec,
    _Designs,
    draw_params,
    fit_lmm,
    posterior_draw,
    predict_exposure,
)
from .numerics import RngStream
from .survival import CoxError, CoxProblem, nelson_aalen

Z975 = 1.959964

METHODS = ("locf", "rc", "pe_rc", "mi", "jm")


class EstimationError(RuntimeError):
    """Pipeline failure, tagged with the stage that failed."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass(frozen=True)
class EstimateResult:
    """One method's association estimate with its total uncertainty."""

    method: str
    gamma_hat: float
    se_total: float
    ci95: tuple[float, float]
    converged: bool
    diagnostics: dict

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.se_total > 0:
            raise ValueError("se_total must be positive")
        lo, hi = self.ci95
        if not (
            math.isclose(lo, self.gamma_hat - Z975 * self.se_total, rel_tol=0, abs_tol=1e-12)
            and math.isclose(hi, self.gamma_hat + Z975 * self.se_total, rel_tol=0, abs_tol=1e-12)
        ):
            raise ValueError("ci95 must equal gamma_hat +/- 1.959964 * se_total")


def _result(method: str, gamma: float, se: float, **diagnostics) -> EstimateResult:
    gamma, se = float(gamma), float(se)
    return EstimateResult(
        method=method,
        gamma_hat=gamma,
        se_total=se,
        ci95=(gamma - Z975 * se, gamma + Z975 * se),
        converged=True,
        diagnostics={k: float(v) for k, v in diagnostics.items()},
    )


def _require_truncated(c: Cohort, method: str) -> None:
    if not c.truncated_at_event:
        raise EstimationError(method, "cohort must be truncated at the event time")


def estimate_locf(c: Cohort) -> EstimateResult:
    """Cox fit carrying each subject's last observed value forward."""
    _require_truncated(c, "locf")
    for s in c.subjects:
        if s.n_visits == 0 or s.visits[0].time > 1e-9:
            raise EstimationError("locf", f"subject {s.id} has no baseline visit")
    paths = [step_path(s.visit_times, s.visit_values, s.event_time) for s in c.subjects]
    try:
        fit = CoxProblem.from_paths(c, paths).fit()
    except CoxError as exc:
        raise EstimationError("cox", str(exc)) from exc
    return _result("locf", float(fit.gamma[0]), float(fit.se_naive[0]), n_events=fit.n_events)


class _TwoStageCox:
    """Shared second stage: Cox problem over basis-predicted paths.

    The (subject x event-time) value matrix is rebuilt from trajectory
    coefficients with one matrix product, which keeps the 500-draw
    parametric bootstrap cheap.
    """

    def __init__(self, c: Cohort, spec: LmmSpec, designs: _Designs):
        self.c = c
        self.spec = spec
        self.designs = designs
        self.times = np.array([s.event_time for s in c.subjects])
        self.events = np.array([s.event for s in c.subjects])
        if not self.events.any():
            raise EstimationError("cox", "zero events: partial likelihood undefined")
        self.grid = np.unique(self.times[self.events])
        self.Fgrid = evaluate_basis(spec.fixed_basis, self.grid)  # (E, p_basis)
        self.Zgrid = evaluate_basis(spec.random, self.grid)  # (E, q)
        self.Ggrid = [
            np.stack([np.asarray(r.at_times(s, self.grid), dtype=float) for s in c.subjects])
            for r in spec.extra_regressors
        ]  # each (N, E)

    def values(self, beta, zeta, u_mat) -> np.ndarray:
        v = (self.Fgrid @ beta)[None, :] + u_mat @ self.Zgrid.T
        for g, z in zip(self.Ggrid, zeta):
            v = v + z * g
        return v

    def fit_at(self, b, L, sigma2) -> tuple[float, float]:
        """Refit the Cox stage at the given stage-1 parameters."""
        u = self.designs.blups(b, L, sigma2)
        n_basis = self.spec.fixed_basis.dimension
        fit = CoxProblem(self.values(b[:n_basis], b[n_basis:], u), self.times, self.events).fit()
        return float(fit.gamma[0]), float(fit.se_naive[0]) ** 2


def _bootstrap_details(
    pipeline: Callable, stage1: LmmFit, n_boot: int, stream: RngStream
) -> tuple[float, int, int]:
    gammas, variances = [], []
    failed = 0
    for bdx in range(n_boot):
        params = draw_params(stage1, stream.child(bdx))
        try:
            g, v = pipeline(params)
        except (CoxError, LmmError, np.linalg.LinAlgError):
            failed += 1
            continue
        gammas.append(g)
        variances.append(v)
    if failed > 0.1 * n_boot:
        raise EstimationError("bootstrap", f"{failed}/{n_boot} bootstrap refits failed")
    n = len(gammas)
    between = float(np.var(gammas, ddof=1)) if n > 1 else 0.0
    total = float(np.mean(variances)) + (1.0 + 1.0 / n) * between
    return total, n, failed


def bootstrap_variance(
    pipeline: Callable, stage1: LmmFit, n_boot: int = 500, stream: Optional[RngStream] = None
) -> float:
    """Total variance of a two-stage estimator by parametric bootstrap.

    Draws stage-1 parameter vectors from N(theta_hat, param_cov), refits the
    second stage through ``pipeline((b, L, sigma2)) -> (gamma, var)``, and
    combines the mean model-based variance with the inflated between-draw
    variance. Draws whose refit fails are skipped and counted; more than 10%
    failures aborts.
    """
    if stream is None:
        stream = RngStream(0)
    total, _, _ = _bootstrap_details(pipeline, stage1, n_boot, stream)
    return total


def estimate_rc(
    c: Cohort,
    spec: LmmSpec,
    post_event: bool = False,
    n_boot: int = 500,
    stream: Optional[RngStream] = None,
) -> EstimateResult:
    """Regression calibration: Cox on the BLUP-predicted exposure paths.

    With ``post_event=True`` the calibration model is fitted on the full
    (untruncated) visit history, which requires a cohort whose exposure
    observation continues past the event.
    """
    method = "pe_rc" if post_event else "rc"
    if post_event and c.truncated_at_event:
        raise EstimationError(method, "post-event calibration needs untruncated visits")
    stage1_cohort = c if post_event else (c if c.truncated_at_event else truncate_at_event(c))
    try:
        fit1 = fit_lmm(stage1_cohort, spec)
    except LmmError as exc:
        raise EstimationError("stage1", str(exc)) from exc
    designs = _Designs(stage1_cohort, spec)
    stage2 = _TwoStageCox(c, spec, designs)
    try:
        gamma, var_naive = stage2.fit_at(
            np.concatenate([fit1.beta, fit1.zeta]), fit1.re_chol, fit1.sigma2
        )
    except CoxError as exc:
        raise EstimationError("cox", str(exc)) from exc
    if stream is None:
        stream = RngStream(0)
    if n_boot > 0:
        total_var, n_used, failed = _bootstrap_details(
            lambda p: stage2.fit_at(*p), fit1, n_boot, stream
        )
    else:
        total_var, n_used, failed = var_naive, 0, 0
    return _result(
        method,
        gamma,
        math.sqrt(total_var),
        n_boot=float(n_used),
        boot_failed=float(failed),
        stage1_loglik=fit1.loglik,
    )


def rubin_pool(estimates, variances) -> tuple[float, float]:
    """Rubin's rules: pooled mean; within + (1 + 1/M) between variance."""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    m = estimates.size
    if m < 2:
        raise ValueError("Rubin pooling needs at least 2 imputations")
    if np.any(variances <= 0):
        raise ValueError("within-imputation variances must be positive")
    pooled = float(estimates.mean())
    total = float(variances.mean()) + (1.0 + 1.0 / m) * float(np.var(estimates, ddof=1))
    return pooled, total


def mi_regressors(c: Cohort) -> tuple[ExtraRegressor, ExtraRegressor]:
    """Event-risk regressors G for the imputation stage-1 model.

    The Nelson-Aalen cumulative hazard is held at its subject-level value at
    the event time for all t; the last-visit indicator marks the final
    observed measurement and, at prediction time, every t at or after it.
    """
    na = nelson_aalen(c)
    at_event = {s.id: float(na(s.event_time)) for s in c.subjects}
    last_time = {s.id: (s.visit_times[-1] if s.n_visits else np.inf) for s in c.subjects}
    na_reg = ExtraRegressor(
        name="nelson_aalen_at_event",
        at_visits=lambda s: np.full(s.n_visits, at_event[s.id]),
        at_times=lambda s, t: np.full(np.shape(t), at_event[s.id]),
    )
    last_reg = ExtraRegressor(
        name="last_visit",
        at_visits=lambda s: (s.visit_times == last_time[s.id]).astype(float),
        at_times=lambda s, t: (np.asarray(t, dtype=float) >= last_time[s.id]).astype(float),
    )
    return na_reg, last_reg


def estimate_mi(
    c: Cohort,
    spec: LmmSpec,
    m_imputations: int = 10,
    n_boot: int = 0,
    stream: Optional[RngStream] = None,
) -> EstimateResult:
    """Imputation-based Cox model with Rubin pooling.

    Stage-1 parameter uncertainty is propagated through the posterior draws,
    so the default total variance is Rubin's rule over model-based within
    variances. ``n_boot > 0`` additionally replaces the within component by
    an RC-style parametric-bootstrap total variance of a single imputation
    (recorded in the diagnostics).
    """
    _require_truncated(c, "mi")
    if stream is None:
        stream = RngStream(0)
    spec_mi = replace(spec, extra_regressors=spec.extra_regressors + mi_regressors(c))
    try:
        fit1 = fit_lmm(c, spec_mi)
    except LmmError as exc:
        raise EstimationError("stage1", str(exc)) from exc

    gammas, variances = [], []
    for m in range(m_imputations):
        st = stream.child(m)
        params = draw_params(fit1, st.child(0))
        u_stream = st.child(1)
        paths = [
            predict_exposure(fit1, s, spec_mi, mode="draw", stream=u_stream, params=params)
            for s in c.subjects
        ]
        try:
            fit = CoxProblem.from_paths(c, paths).fit()
        except CoxError as exc:
            raise EstimationError("cox", f"imputation {m}: {exc}") from exc
        gammas.append(float(fit.gamma[0]))
        variances.append(float(fit.se_naive[0]) ** 2)
    try:
        pooled, total = rubin_pool(gammas, variances)
    except ValueError as exc:
        raise EstimationError("pooling", str(exc)) from exc

    boot_within = 0.0
    if n_boot > 0:
        designs = _Designs(c, spec_mi)
        stage2 = _TwoStageCox(c, spec_mi, designs)
        within, _, _ = _bootstrap_details(
            lambda p: stage2.fit_at(*p), fit1, n_boot, stream.child(m_imputations)
        )
        total = within + (1.0 + 1.0 / m_imputations) * float(np.var(gammas, ddof=1))
        boot_within = 1.0
    return _result(
        "mi",
        pooled,
        math.sqrt(total),
        imputations=float(m_imputations),
        between_var=float(np.var(gammas, ddof=1)),
        within_var=float(np.mean(variances)),
        bootstrap_within=boot_within,
        stage1_loglik=fit1.loglik,
    )


def _mean_path_gamma(c: Cohort, spec: LmmSpec, fit1: LmmFit) -> float:
    try:
        stage2 = _TwoStageCox(c, spec, _Designs(c, spec))
        gamma, _ = stage2.fit_at(np.concatenate([fit1.beta, fit1.zeta]), fit1.re_chol, fit1.sigma2)
        return gamma
    except (CoxError, EstimationError):
        return 0.0


def estimate_jm(
    c: Cohort,
    spec: LmmSpec,
    baseline_family: str = "weibull",
    n_quad: int = 9,
    tol: float = 1e-3,
) -> EstimateResult:
    """Joint model estimate; SE from the inverse Hessian of the joint
    likelihood. Initialized from the stage-1 mixed model and the
    regression-calibration point estimate."""
    _require_truncated(c, "jm")
    if n_quad < 3:
        raise EstimationError("jm", "n_quad must be >= 3")
    try:
        fit1 = fit_lmm(c, spec)
    except LmmError as exc:
        raise EstimationError("stage1", str(exc)) from exc
    gamma0 = _mean_path_gamma(c, spec, fit1)
    try:
        fit = fit_joint_model(
            c,
            spec,
            baseline_family=baseline_family,
            n_quad=n_quad,
            tol=tol,
            stage1=fit1,
            gamma_init=gamma0,
        )
    except JmError as exc:
        raise EstimationError("jm", str(exc)) from exc
    return _result(
        "jm",
        fit.gamma,
        fit.gamma_se,
        n_quad=float(n_quad),
        loglik=fit.loglik,
        sigma2=fit.sigma2,
    )
