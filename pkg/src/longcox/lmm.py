"""Maximum-likelihood linear mixed calibration model.

Model for subject i at visit times t_ij:

    y_ij = F(t_ij)' beta + G_ij' zeta + Z(t_ij)' u_i + eps_ij,
    u_i ~ N(0, B),  eps_ij ~ N(0, sigma^2)

with F a time basis, Z a (sub-)basis for the random effects and G optional
per-visit regressors. The marginal likelihood is evaluated per subject with
the Woodbury identity (all solves are q x q), variance components are
optimized on an unconstrained scale (Cholesky factor of B, log sigma with a
small floor so that the noiseless limit sigma^2 -> 0 stays well posed), and
the analytic score is supplied to the quasi-Newton maximizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data_model import Cohort, ExposurePath, SubjectRecord, TimeBasis, evaluate_basis
from .numerics import (
    CholeskyError,
    RngStream,
    SpdMatrix,
    cholesky,
    draw_normal,
    fd_hessian,
    maximize,
    pd_inverse,
    psd_factor,
)

SIGMA2_FLOOR = 1e-8
LOG2PI = math.log(2.0 * math.pi)


class LmmError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtraRegressor:
    """A per-visit covariate G_r with a stated value at arbitrary times.

    ``at_visits`` gives the column at the subject's observed visit times;
    ``at_times`` defines the value used when predicting the exposure at any
    t (needed because imputation-style regressors such as the last-visit
    indicator are only naturally defined at visits).
    """

    name: str
    at_visits: Callable[[SubjectRecord], np.ndarray]
    at_times: Callable[[SubjectRecord, np.ndarray], np.ndarray]


def covariate_regressor(name: str) -> ExtraRegressor:
    """Baseline covariate entering the fixed part, constant in time."""
    return ExtraRegressor(
        name=name,
        at_visits=lambda s: np.full(s.n_visits, s.baseline_covariates[name]),
        at_times=lambda s, t: np.full(np.shape(t), s.baseline_covariates[name]),
    )


@dataclass(frozen=True)
class LmmSpec:
    """Design of the calibration model: F, Z and extra regressors G."""

    fixed_basis: TimeBasis
    random_basis: Optional[TimeBasis] = None
    extra_regressors: tuple[ExtraRegressor, ...] = ()

    def __post_init__(self):
        if self.random.dimension > self.fixed_basis.dimension:
            raise ValueError("random basis dimension exceeds fixed basis dimension")

    @property
    def random(self) -> TimeBasis:
        return self.random_basis if self.random_basis is not None else self.fixed_basis

    @property
    def n_fixed(self) -> int:
        return self.fixed_basis.dimension + len(self.extra_regressors)


@dataclass(frozen=True, eq=False)
class LmmFit:
    """Converged ML fit. Parameter order in ``param_cov`` is (beta, zeta,
    lower-triangular Cholesky of B row-wise, log-sigma); variance components
    are on their unconstrained optimization scale."""

    beta: np.ndarray
    zeta: np.ndarray
    re_cov: SpdMatrix
    sigma2: float
    param_cov: np.ndarray
    loglik: float
    re_chol: np.ndarray  # exact Cholesky-scale factor of the fitted B

    @property
    def n_params(self) -> int:
        return self.param_cov.shape[0]

    def pack(self) -> np.ndarray:
        q = self.re_chol.shape[0]
        ell = self.re_chol[np.tril_indices(q)]
        s = 0.5 * math.log(max(self.sigma2 - SIGMA2_FLOOR, 1e-300))
        return np.concatenate([self.beta, self.zeta, ell, [s]])


def _subject_design(s: SubjectRecord, spec: LmmSpec):
    t = s.visit_times
    F = evaluate_basis(spec.fixed_basis, t) if t.size else np.zeros((0, spec.fixed_basis.dimension))
    Z = evaluate_basis(spec.random, t) if t.size else np.zeros((0, spec.random.dimension))
    if spec.extra_regressors:
        G = np.column_stack([np.asarray(r.at_visits(s), dtype=float) for r in spec.extra_regressors]) if t.size else np.zeros((0, len(spec.extra_regressors)))
        X = np.hstack([F, G])
    else:
        X = F
    return s.visit_values, X, Z


class _Designs:
    """Per-cohort design matrices grouped by visit-time pattern; subjects
    sharing a pattern share Z, so D = sigma^2 I + L'Z'Z L is factored once
    per group."""

    def __init__(self, c: Cohort, spec: LmmSpec):
        self.q = spec.random.dimension
        self.p = spec.n_fixed
        self.n_subjects = c.n_subjects
        groups: dict[tuple, list] = {}
        for i, s in enumerate(c.subjects):
            if s.n_visits == 0:
                continue
            y, X, Z = _subject_design(s, spec)
            groups.setdefault(tuple(s.visit_times.tolist()), []).append((i, y, X, Z))
        self.groups = []
        self.n_total = 0
        for members in groups.values():
            Z = members[0][3]
            idx = np.array([m[0] for m in members])
            y = np.stack([m[1] for m in members])
            X = np.stack([m[2] for m in members])
            self.groups.append((idx, y, X, Z))
            self.n_total += y.size

    def blups(self, b, L, sigma2) -> np.ndarray:
        """Posterior random-effect means for all subjects (cohort order);
        zero rows for subjects without visits."""
        out = np.zeros((self.n_subjects, self.q))
        for idx, y, X, Z in self.groups:
            Zt = Z @ L
            D = sigma2 * np.eye(self.q) + Zt.T @ Zt
            r = y - np.einsum("mnp,p->mn", X, b)
            out[idx] = (r @ Zt) @ np.linalg.inv(D) @ L.T
        return out

    def loglik_score(self, b, L, sigma2, want_score=True):
        q = self.q
        ll = 0.0
        score_b = np.zeros(self.p)
        score_L = np.zeros((q, q))
        sum_ee = 0.0
        sum_tr = 0.0
        for _, y, X, Z in self.groups:
            m, n = y.shape
            Zt = Z @ L  # (n, q)
            D = sigma2 * np.eye(q) + Zt.T @ Zt
            Dc = cholesky(D)
            logdetD = 2.0 * float(np.log(np.diag(Dc)).sum())
            Dinv = np.linalg.inv(Dc.T) @ np.linalg.inv(Dc)
            r = y - np.einsum("mnp,p->mn", X, b)
            a = r @ Zt  # (m, q)
            quad = (r * r).sum(axis=1) - np.einsum("mq,qr,mr->m", a, Dinv, a)
            ll += -0.5 * (
                m * (n * LOG2PI + (n - q) * math.log(sigma2) + logdetD) + quad.sum() / sigma2
            )
            if not want_score:
                continue
            e = (r - a @ Dinv @ Zt.T) / sigma2  # (m, n) rows of V^{-1} r
            score_b += np.einsum("mnp,mn->p", X, e)
            v = e @ Z
            score_L += v.T @ (v @ L) - m * (Z.T @ Z @ L @ Dinv)
            sum_ee += float((e * e).sum())
            sum_tr += m * (n - float(np.trace(Dinv @ (Zt.T @ Zt)))) / sigma2
        if not want_score:
            return ll, None
        return ll, (score_b, score_L, sum_ee - sum_tr)


def marginal_loglik(c: Cohort, spec: LmmSpec, beta, re_cov, sigma2: float, zeta=()) -> float:
    """Marginal log-likelihood at the given parameters (per-subject marginal
    covariance Z B Z' + sigma^2 I, summed over subjects)."""
    designs = _Designs(c, spec)
    b = np.concatenate([np.asarray(beta, float), np.asarray(zeta, float)])
    L = psd_factor(np.asarray(getattr(re_cov, "entries", re_cov), float))
    return designs.loglik_score(b, L, float(sigma2), want_score=False)[0]


def _unpack(theta, p, q):
    b = theta[:p]
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta[p : p + q * (q + 1) // 2]
    s = theta[-1]
    sigma2 = SIGMA2_FLOOR + math.exp(min(2.0 * s, 700.0))
    return b, L, sigma2


def fit_lmm(c: Cohort, spec: LmmSpec, tol: float = 1e-4, max_iter: int = 1000) -> LmmFit:
    """Maximize the marginal likelihood; parameter covariance is the inverse
    Hessian of the negative log-likelihood on the unconstrained scale.

    Raises :class:`LmmError` on non-convergence (with the best iterate and
    gradient norm in the message) or on a singular Hessian in the
    fixed-effect block (over-parameterized basis).
    """
    designs = _Designs(c, spec)
    p, q = designs.p, designs.q
    if designs.n_total <= p:
        raise LmmError(f"{designs.n_total} visits cannot identify {p} fixed parameters")
    n_ell = q * (q + 1) // 2

    # start: OLS fixed effects, residual variance split between B and sigma^2
    Xall = np.concatenate([X.reshape(-1, p) for _, _, X, _ in designs.groups])
    yall = np.concatenate([y.ravel() for _, y, _, _ in designs.groups])
    b0, *_ = np.linalg.lstsq(Xall, yall, rcond=None)
    resid_var = max(float(np.var(yall - Xall @ b0)), 1e-4)
    Zall = np.concatenate([np.tile(Z, (y.shape[0], 1)) for _, y, _, Z in designs.groups])
    rms = np.sqrt((Zall**2).mean(axis=0))
    L0 = np.diag(np.sqrt(resid_var / 2.0) / np.maximum(rms, 1e-8))
    theta0 = np.concatenate([b0, L0[np.tril_indices(q)], [0.5 * math.log(resid_var / 2.0)]])

    def objective(theta):
        b, L, sigma2 = _unpack(theta, p, q)
        return designs.loglik_score(b, L, sigma2, want_score=False)[0]

    def gradient(theta):
        b, L, sigma2 = _unpack(theta, p, q)
        _, (gb, gL, gs2) = designs.loglik_score(b, L, sigma2)
        ds2 = math.exp(min(2.0 * theta[-1], 700.0))  # d sigma^2 / d s
        return np.concatenate([gb, gL[np.tril_indices(q)], [0.5 * gs2 * 2.0 * ds2]])

    res = maximize(objective, theta0, tolerance=tol, gradient=gradient, max_iter=max_iter,
                   compute_hessian=False)
    if not res.converged:
        raise LmmError(
            f"mixed-model likelihood did not converge: gradient max-norm "
            f"{res.gradient_max:.3g} at iterate {np.array2string(res.argmax, precision=4)}"
        )
    theta = res.argmax
    b, L, sigma2 = _unpack(theta, p, q)

    hess = fd_hessian(lambda th: -objective(th), theta, gradient=lambda th: -gradient(th))
    flat: list[int] = []
    if sigma2 < 10.0 * SIGMA2_FLOOR:  # residual variance on its boundary
        flat.append(p + n_ell)
    try:
        param_cov = pd_inverse(hess, drop_flat=flat)
    except CholeskyError:
        diag = np.abs(np.diag(hess))
        weak = [i for i in range(p, p + n_ell + 1) if diag[i] < 1e-8 * max(1.0, diag.max())]
        if not weak:
            raise LmmError("singular Hessian: consider reducing the time basis") from None
        try:
            param_cov = pd_inverse(hess, drop_flat=sorted(set(flat + weak)))
        except CholeskyError:
            raise LmmError("singular Hessian: consider reducing the time basis") from None

    B = L @ L.T
    jitter = 1e-12 * max(1.0, float(np.trace(B)))
    n_basis = spec.fixed_basis.dimension
    return LmmFit(
        beta=b[:n_basis],
        zeta=b[n_basis:],
        re_cov=SpdMatrix(B + jitter * np.eye(q)),
        sigma2=sigma2,
        param_cov=param_cov,
        loglik=res.value,
        re_chol=L,
    )


def _posterior_moments(s: SubjectRecord, spec: LmmSpec, b, L, sigma2):
    """Posterior mean and covariance of u_i given the subject's visits."""
    q = L.shape[0]
    if s.n_visits == 0:
        return np.zeros(q), L @ L.T
    y, X, Z = _subject_design(s, spec)
    Zt = Z @ L
    D = sigma2 * np.eye(q) + Zt.T @ Zt
    Dinv = np.linalg.inv(D)
    r = y - X @ b
    mean = L @ (Dinv @ (Zt.T @ r))
    cov = sigma2 * L @ Dinv @ L.T
    return mean, 0.5 * (cov + cov.T)


def blup(fit: LmmFit, s: SubjectRecord, spec: LmmSpec) -> np.ndarray:
    """Posterior mean of the subject's random effects, B Z' V^{-1} (y - X b).

    A subject with no visits shrinks fully to the prior mean (zero vector).
    """
    b = np.concatenate([fit.beta, fit.zeta])
    mean, _ = _posterior_moments(s, spec, b, fit.re_chol, fit.sigma2)
    return mean


def draw_params(fit: LmmFit, stream: RngStream):
    """One draw of (b, L, sigma2) from the asymptotic normal N(theta_hat,
    param_cov) on the unconstrained scale."""
    theta = draw_normal(stream, fit.pack(), psd_factor(fit.param_cov))
    p = fit.beta.size + fit.zeta.size
    q = fit.re_chol.shape[0]
    b = theta[:p]
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta[p:-1]
    sigma2 = SIGMA2_FLOOR + math.exp(2.0 * float(theta[-1]))
    return b, L, sigma2


def posterior_draw(
    fit: LmmFit,
    s: SubjectRecord,
    spec: LmmSpec,
    stream: RngStream,
    params: Optional[tuple] = None,
):
    """Sample (beta, zeta, u) for one subject.

    Model parameters are drawn from N(theta_hat, param_cov) on the
    unconstrained scale (pass ``params`` to reuse one draw across subjects,
    as proper multiple imputation requires); u is then drawn from its normal
    posterior evaluated at the drawn parameters. A subject with no visits
    gets u = 0 (fully shrunk, mirroring :func:`blup`).
    """
    b, L, sigma2 = params if params is not None else draw_params(fit, stream)
    n_basis = fit.beta.size
    if s.n_visits == 0:
        return b[:n_basis], b[n_basis:], np.zeros(L.shape[0])
    mean, cov = _posterior_moments(s, spec, b, L, sigma2)
    u = draw_normal(stream, mean, psd_factor(cov))
    return b[:n_basis], b[n_basis:], u


def _prediction_path(s: SubjectRecord, spec: LmmSpec, beta, zeta, u) -> ExposurePath:
    fixed = spec.fixed_basis
    rand = spec.random
    extras = spec.extra_regressors

    def fn(t):
        t_arr = np.asarray(t, dtype=float)
        out = evaluate_basis(fixed, t_arr) @ beta + evaluate_basis(rand, t_arr) @ u
        for r, z in zip(extras, zeta):
            out = out + z * np.asarray(r.at_times(s, t_arr), dtype=float)
        return out

    return ExposurePath(fn=fn, horizon=float(s.event_time))


def predict_exposure(
    fit: LmmFit,
    s: SubjectRecord,
    spec: LmmSpec,
    mode: str = "mean",
    stream: Optional[RngStream] = None,
    params: Optional[tuple] = None,
) -> ExposurePath:
    """Predicted exposure path F(t)'beta + Z(t)'u (+ G(t)'zeta).

    ``mean`` uses the ML estimates with the BLUP; ``draw`` uses one
    posterior draw of parameters and random effects (requires ``stream``).
    """
    if mode == "mean":
        beta, zeta, u = fit.beta, fit.zeta, blup(fit, s, spec)
    elif mode == "draw":
        if stream is None:
            raise ValueError("draw mode requires a random stream")
        beta, zeta, u = posterior_draw(fit, s, spec, stream, params=params)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _prediction_path(s, spec, beta, zeta, u)
