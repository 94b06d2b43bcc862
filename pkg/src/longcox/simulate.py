"""Cohort generation under the joint data-generating mechanism.

Each subject gets random-effect trajectory coefficients, an event time drawn
by inverting the subject's cumulative hazard (uniform draw, bracketed Brent
root), a visit grid with optional intermittent missingness, and noisy
exposure measurements. Presets re-derive the simulation scenario grid:
three baseline-survival levels x two measurement-error magnitudes x two
association strengths, plus quadratic-trajectory, correlated-random-effect,
intermittent-missingness and null-association families.

Baseline hazards are not hard-coded: Weibull scales (and exponential rates
for the null family) are calibrated numerically so the expected event
fraction by the horizon hits the target level; see
:func:`calibrate_baseline`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .data_model import Cohort, ExposurePath, SubjectRecord, TimeBasis, Visit, basis_path, evaluate_basis
from .numerics import RngStream, brent_root, draw_normal, gauss_hermite, psd_factor
from .survival import ParametricBaseline, cumulative_hazard

SURVIVAL_TARGETS = {"high": 0.20, "medium": 0.40, "low": 0.65}
_WEIBULL_SHAPE = 1.5
_HAZARD_CAP = 1e12


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Complete description of one data-generating scenario."""

    label: str
    gamma_true: float
    re_cov: np.ndarray
    fixed_effects: np.ndarray
    error_sd: float
    baseline: ParametricBaseline
    n_subjects: int = 500
    trajectory: str = "linear"
    visit_spacing: float = 2.0
    horizon: float = 10.0
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.horizon <= 0 or self.visit_spacing <= 0:
            raise ValueError("horizon and visit_spacing must be positive")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.error_sd < 0.0:
            raise ValueError("error_sd must be nonnegative")
        re_cov = np.asarray(self.re_cov, dtype=float)
        fixed = np.asarray(self.fixed_effects, dtype=float)
        object.__setattr__(self, "re_cov", re_cov)
        object.__setattr__(self, "fixed_effects", fixed)
        if re_cov.shape != (fixed.size, fixed.size):
            raise ValueError("re_cov dimension must match the trajectory dimension")
        if not np.allclose(re_cov, re_cov.T):
            raise ValueError("re_cov must be symmetric")
        if np.linalg.eigvalsh(re_cov).min() < -1e-10:
            raise ValueError("re_cov must be positive semidefinite")
        if self.trajectory not in ("linear", "quadratic"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if fixed.size != (2 if self.trajectory == "linear" else 3):
            raise ValueError("fixed_effects length must match the trajectory degree + 1")

    @property
    def basis(self) -> TimeBasis:
        return TimeBasis.polynomial(1 if self.trajectory == "linear" else 2)


@dataclass(frozen=True, eq=False)
class GeneratedTruth:
    """Oracle side-channel: per-subject truths consistent with the cohort."""

    ids: tuple[str, ...]
    random_effects: np.ndarray  # (N, q)
    coefficients: np.ndarray  # (N, q) trajectory coefficients incl. fixed effects
    true_event_time: np.ndarray  # (N,), inf when the event never occurs
    basis: TimeBasis

    def path(self, i: int, horizon: float) -> ExposurePath:
        return basis_path(self.basis, self.coefficients[i], horizon)

    def paths(self, horizon: float) -> list[ExposurePath]:
        return [self.path(i, horizon) for i in range(len(self.ids))]


def _subject_cum_hazard(cfg: ScenarioConfig, coef: np.ndarray):
    path = basis_path(cfg.basis, coef, horizon=np.inf)
    return lambda t: min(
        cumulative_hazard(cfg.baseline, path, cfg.gamma_true, t), _HAZARD_CAP
    )


def generate(
    cfg: ScenarioConfig, stream: RngStream, truncate: bool = True
) -> tuple[Cohort, GeneratedTruth]:
    """Simulate one cohort plus its truth sidecar.

    Visit values are drawn on the full grid up to the horizon regardless of
    ``truncate``, so the truncated cohort is exactly the truncation of the
    untruncated one for the same stream (the post-event RC pipeline relies
    on the untruncated view). A subject whose cumulative hazard never
    reaches its exponential target is censored at the horizon with
    ``true_event_time`` recorded as inf.
    """
    q = cfg.basis.dimension
    grid = np.arange(0.0, cfg.horizon + 1e-9, cfg.visit_spacing)
    re_factor = psd_factor(cfg.re_cov)
    subjects = []
    u_all = np.empty((cfg.n_subjects, q))
    coef_all = np.empty((cfg.n_subjects, q))
    t_true = np.empty(cfg.n_subjects)
    ids = tuple(f"s{i:05d}" for i in range(cfg.n_subjects))

    for i in range(cfg.n_subjects):
        sub = stream.child(i)
        u = draw_normal(sub, np.zeros(q), re_factor)
        coef = cfg.fixed_effects + u
        target = -np.log1p(-sub.generator.uniform())
        lam = _subject_cum_hazard(cfg, coef)
        hi = cfg.horizon
        while lam(hi) < target and hi < 512.0 * cfg.horizon:
            hi *= 2.0
        if lam(hi) < target:
            t_event = np.inf
        elif target <= 0.0:
            t_event = 1e-12
        else:
            t_event = brent_root(lambda t: lam(t) - target, 0.0, hi, tol=1e-10)
            t_event = max(t_event, 1e-12)
        t_obs = min(t_event, cfg.horizon)
        event = bool(t_event <= cfg.horizon)

        noise = cfg.error_sd * sub.generator.standard_normal(grid.size)
        miss = sub.generator.uniform(size=grid.size - 1) < cfg.missing_rate
        keep = np.concatenate([[True], ~miss])
        values = evaluate_basis(cfg.basis, grid) @ coef + noise
        visits = tuple(
            Visit(float(t), float(v))
            for t, v, k in zip(grid, values, keep)
            if k and (not truncate or t <= t_obs)
        )
        subjects.append(
            SubjectRecord(id=ids[i], visits=visits, event_time=float(t_obs), event=event)
        )
        u_all[i] = u
        coef_all[i] = coef
        t_true[i] = t_event

    cohort = Cohort(subjects=tuple(subjects), truncated_at_event=truncate)
    truth = GeneratedTruth(
        ids=ids,
        random_effects=u_all,
        coefficients=coef_all,
        true_event_time=t_true,
        basis=cfg.basis,
    )
    return cohort, truth


def write_truth(truth: GeneratedTruth, path) -> None:
    q = truth.random_effects.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *[f"u{j}" for j in range(q)], "true_event_time"])
        for i, sid in enumerate(truth.ids):
            writer.writerow(
                [sid, *[repr(float(v)) for v in truth.random_effects[i]], repr(float(truth.true_event_time[i]))]
            )


def expected_event_fraction(
    baseline: ParametricBaseline,
    gamma: float,
    fixed_effects: np.ndarray,
    re_cov: np.ndarray,
    basis: TimeBasis,
    horizon: float,
    n_quad: int = 15,
    n_time: int = 40,
) -> float:
    """E_u[1 - exp(-Lambda(horizon | u))] by Gauss-Hermite over the random
    effects and Gauss-Legendre over time."""
    q = np.asarray(re_cov).shape[0]
    z, w = gauss_hermite(n_quad)
    grids = np.meshgrid(*([z] * q), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)  # (K, q)
    wgrids = np.meshgrid(*([w] * q), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids]), axis=0) / np.pi ** (q / 2.0)
    u = nodes @ (np.sqrt(2.0) * psd_factor(re_cov)).T  # (K, q)
    coefs = np.asarray(fixed_effects)[None, :] + u

    x, gw = np.polynomial.legendre.leggauss(n_time)
    s = 0.5 * horizon * (x + 1.0)
    F = evaluate_basis(basis, s)  # (n_time, q)
    expo = np.exp(np.minimum(gamma * (coefs @ F.T), 700.0))  # (K, n_time)
    lam0 = baseline.hazard(s)
    cum = 0.5 * horizon * (expo * lam0[None, :]) @ gw
    return float(weights @ (1.0 - np.exp(-cum)))


@lru_cache(maxsize=64)
def _calibrate_cached(family: str, target: float, gamma: float, fixed: tuple, re_flat: tuple,
                      q: int, degree: int, horizon: float) -> float:
    re_cov = np.asarray(re_flat).reshape(q, q)
    basis = TimeBasis.polynomial(degree)
    fixed_arr = np.asarray(fixed)

    def frac(param: float) -> float:
        if family == "weibull":
            b = ParametricBaseline.weibull(_WEIBULL_SHAPE, param)
        else:
            b = ParametricBaseline.exponential(param)
        return expected_event_fraction(b, gamma, fixed_arr, re_cov, basis, horizon)

    if family == "weibull":  # event fraction decreases in the scale
        return brent_root(lambda sc: frac(sc) - target, 1e-2, 1e6, tol=1e-10)
    return brent_root(lambda r: frac(r) - target, 1e-9, 1e3, tol=1e-12)


def calibrate_baseline(
    family: str,
    level: str,
    gamma: float,
    fixed_effects,
    re_cov,
    degree: int,
    horizon: float = 10.0,
) -> ParametricBaseline:
    """Baseline with its free parameter solved so the expected event
    fraction by the horizon equals the named survival level's target."""
    target = SURVIVAL_TARGETS[level]
    re_cov = np.asarray(re_cov, dtype=float)
    param = _calibrate_cached(
        family,
        target,
        float(gamma),
        tuple(float(v) for v in np.asarray(fixed_effects)),
        tuple(re_cov.ravel().tolist()),
        re_cov.shape[0],
        degree,
        float(horizon),
    )
    if family == "weibull":
        return ParametricBaseline.weibull(_WEIBULL_SHAPE, param)
    return ParametricBaseline.exponential(param)


_LEVELS = ("high", "medium", "low")

# linear-trajectory generation quantities shared by the main grid: the
# error variances {1, 9} versus exposure variance 1 + 0.5 t^2 reproduce the
# stated ratios (equal at t=0 and ~11% by t=4; 9x at t=0 and equal by t=4)
_LINEAR_FIXED = (0.0, 1.0)
_LINEAR_RECOV = ((1.0, 0.0), (0.0, 0.5))
_QUAD_FIXED = (0.0, 1.0, -0.05)
_QUAD_RECOV = ((1.0, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.02))
_RE_CORRELATION = 0.5


def _grid_cell(k: int) -> tuple[float, float, str]:
    """(gamma, error_sd, survival level) for main-scenario index 1..12."""
    if not 1 <= k <= 12:
        raise ValueError(f"main scenario index must be 1..12, got {k}")
    gamma = 0.4 if k > 6 else 0.2
    pos = (k - 1) % 6
    error_sd = 1.0 if pos < 3 else 3.0
    return gamma, error_sd, _LEVELS[pos % 3]


def preset(scenario_id: str | int) -> ScenarioConfig:
    """Scenario configuration by label.

    ``"1"``..``"12"``: the main grid (weaker association 1-6, stronger
    7-12; within each half, error SD 1 then 3; survival high/medium/low).
    ``"quadratic-k"``, ``"correlated-k"``, ``"missing-k"`` (k in 1..12)
    vary the trajectory shape, random-effect correlation (0.5) and
    intermittent missingness (10%). ``"null-k"`` (k in 1..6) has no
    association and an exponential baseline, indexed like scenarios 1-6.
    """
    label = str(scenario_id)
    family, _, idx = label.partition("-")
    if family.isdigit() and not idx:
        family, idx = "main", family
    if not idx.isdigit():
        raise ValueError(f"unknown scenario label {label!r}")
    k = int(idx)

    if family == "null":
        if not 1 <= k <= 6:
            raise ValueError(f"null scenario index must be 1..6, got {k}")
        gamma, error_sd, level = _grid_cell(k)
        gamma = 0.0
        fixed, re_cov, trajectory, missing = _LINEAR_FIXED, _LINEAR_RECOV, "linear", 0.0
        baseline_family = "exponential"
    elif family in ("main", "quadratic", "correlated", "missing"):
        gamma, error_sd, level = _grid_cell(k)
        baseline_family = "weibull"
        trajectory, missing = "linear", 0.0
        fixed, re_cov = _LINEAR_FIXED, _LINEAR_RECOV
        if family == "quadratic":
            trajectory, fixed, re_cov = "quadratic", _QUAD_FIXED, _QUAD_RECOV
        elif family == "correlated":
            off = _RE_CORRELATION * np.sqrt(_LINEAR_RECOV[0][0] * _LINEAR_RECOV[1][1])
            re_cov = ((1.0, off), (off, 0.5))
        elif family == "missing":
            missing = 0.10
    else:
        raise ValueError(f"unknown scenario label {label!r}")

    re_arr = np.asarray(re_cov, dtype=float)
    fixed_arr = np.asarray(fixed, dtype=float)
    # the three baseline hazards are shared across a family's grid: they are
    # calibrated once under the weaker association (or gamma=0 for the null
    # family), matching a design where only gamma and error_sd move
    cal_gamma = 0.0 if family == "null" else 0.2
    baseline = calibrate_baseline(
        baseline_family, level, cal_gamma, fixed_arr, re_arr,
        degree=(2 if trajectory == "quadratic" else 1),
    )
    return ScenarioConfig(
        label=label,
        gamma_true=gamma,
        re_cov=re_arr,
        fixed_effects=fixed_arr,
        error_sd=error_sd,
        baseline=baseline,
        trajectory=trajectory,
        missing_rate=missing,
    )
