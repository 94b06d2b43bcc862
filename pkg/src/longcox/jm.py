"""Joint model for the longitudinal exposure and the event hazard.

Marginal likelihood per subject:

    L_i = int [prod_j N(y_ij; F(t_ij)'b + Z(t_ij)'u, sigma^2)]
          * lambda_i(T_i | u)^{E_i} exp(-Lambda_i(T_i | u)) * N(u; 0, B) du

with lambda_i(t | u) = lambda_0(t) exp(gamma X_i(t | u)) and X the modeled
exposure level. The integral over u uses Gauss-Hermite quadrature centered
and scaled at each subject's stage-1 posterior (pseudo-adaptive: the nodes
are fixed during optimization, so the analytic gradient below is the exact
gradient of the approximated objective). The cumulative hazard uses fixed
per-subject Gauss-Legendre nodes on [0, T_i].

Variance components are parameterized as in the mixed model (Cholesky of B,
log sigma with a floor); baseline parameters are optimized on the log scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .data_model import Cohort, SubjectRecord, evaluate_basis
from .lmm import (
    LOG2PI,
    SIGMA2_FLOOR,
    LmmFit,
    LmmSpec,
    _posterior_moments,
    _subject_design,
    fit_lmm,
)
from .numerics import CholeskyError, cholesky, fd_hessian, gauss_hermite, maximize, pd_inverse, psd_factor
from .survival import ParametricBaseline


class JmError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class JmFit:
    """Converged joint-model fit; ``param_cov`` is the inverse Hessian over
    (fixed effects, Cholesky of B, log sigma, gamma, log baseline params)."""

    beta: np.ndarray
    zeta: np.ndarray
    re_cov: np.ndarray
    sigma2: float
    gamma: float
    baseline: ParametricBaseline
    param_cov: np.ndarray
    loglik: float
    gamma_index: int
    n_quad: int

    @property
    def gamma_se(self) -> float:
        return float(np.sqrt(self.param_cov[self.gamma_index, self.gamma_index]))


class _BaselineMap:
    """Unconstrained (log) parameterization of a baseline hazard family."""

    def __init__(self, family: str, cuts: tuple[float, ...] = ()):
        self.family = family
        self.cuts = cuts
        self.n_params = {"exponential": 1, "weibull": 2}.get(family, len(cuts) + 1)

    def make(self, theta_b: np.ndarray) -> ParametricBaseline:
        p = np.exp(np.asarray(theta_b, dtype=float))
        if self.family == "exponential":
            return ParametricBaseline.exponential(p[0])
        if self.family == "weibull":
            return ParametricBaseline.weibull(p[0], p[1])
        return ParametricBaseline.piecewise_constant(self.cuts, p)

    def log_hazard_partials(self, theta_b: np.ndarray, t: np.ndarray):
        """log lambda_0(t) and its partials w.r.t. the log-scale parameters.

        Returns (logh, partials) with partials shaped (n_params,) + t.shape.
        """
        t = np.asarray(t, dtype=float)
        if self.family == "exponential":
            return np.full(t.shape, theta_b[0]), np.ones((1,) + t.shape)
        if self.family == "weibull":
            a, c = theta_b  # log shape, log scale
            k = math.exp(min(a, 60.0))
            with np.errstate(divide="ignore"):
                logt = np.log(t)
            logh = a + (k - 1.0) * logt - k * c
            return logh, np.stack([1.0 + k * (logt - c), np.full(t.shape, -k)])
        idx = np.searchsorted(np.asarray(self.cuts), t, side="right")
        logh = np.asarray(theta_b)[idx]
        partials = np.stack([(idx == j).astype(float) for j in range(self.n_params)])
        return logh, partials


class JointLikelihood:
    """Precomputed joint marginal log-likelihood and its gradient.

    Parameter vector layout: fixed effects b (basis then extra regressors),
    row-wise lower triangle of chol(B), log sigma, gamma, log baseline
    parameters.
    """

    def __init__(
        self,
        c: Cohort,
        spec: LmmSpec,
        stage1: LmmFit,
        baseline_map: _BaselineMap,
        n_quad: int = 9,
        n_time: int = 15,
        chunk_entries: int = 12_000_000,
    ):
        if not c.truncated_at_event:
            raise JmError("joint model requires a cohort truncated at the event")
        if n_quad < 3:
            raise JmError("n_quad must be >= 3")
        self.spec = spec
        self.bmap = baseline_map
        q = spec.random.dimension
        p = spec.n_fixed
        self.q, self.p = q, p
        self.n_ell = q * (q + 1) // 2
        self.n_quad = n_quad
        self.idx_ell = slice(p, p + self.n_ell)
        self.idx_s = p + self.n_ell
        self.idx_gamma = p + self.n_ell + 1
        self.idx_base = slice(self.idx_gamma + 1, self.idx_gamma + 1 + baseline_map.n_params)
        self.n_params = self.idx_gamma + 1 + baseline_map.n_params
        self._tril = np.tril_indices(q)

        subjects = c.subjects
        N = len(subjects)
        self.N = N
        self.T = np.array([s.event_time for s in subjects])
        self.E = np.array([s.event for s in subjects], dtype=float)
        self.n_vis = np.array([s.n_visits for s in subjects], dtype=float)

        self.Syy = np.zeros(N)
        self.Sxy = np.zeros((N, p))
        self.Sxx = np.zeros((N, p, p))
        self.Szy = np.zeros((N, q))
        self.Szx = np.zeros((N, q, p))
        self.Szz = np.zeros((N, q, q))
        for i, s in enumerate(subjects):
            y, X, Z = _subject_design(s, spec)
            self.Syy[i] = y @ y
            self.Sxy[i] = X.T @ y
            self.Sxx[i] = X.T @ X
            self.Szy[i] = Z.T @ y
            self.Szx[i] = Z.T @ X
            self.Szz[i] = Z.T @ Z

        # fixed design at the event time and at mapped Gauss-Legendre nodes:
        # s = T v^2 removes the Weibull hazard's power singularity at 0, so
        # a short rule integrates the cumulative hazard to high accuracy
        self.FT = np.stack([self._fixed_design(s, np.array([s.event_time]))[0] for s in subjects])
        self.ZT = evaluate_basis(spec.random, self.T)
        gx, gw = np.polynomial.legendre.leggauss(n_time)
        v = 0.5 * (gx + 1.0)
        self.s_nodes = self.T[:, None] * v[None, :] ** 2  # (N, Q)
        self.s_weights = self.T[:, None] * (gw * v)[None, :]
        self.Fs = np.stack([self._fixed_design(s, self.s_nodes[i]) for i, s in enumerate(subjects)])
        self.Zs = np.stack([evaluate_basis(spec.random, self.s_nodes[i]) for i in range(N)])

        # pseudo-adaptive nodes from the stage-1 posterior of each subject
        z1, w1 = gauss_hermite(n_quad)
        zg = np.meshgrid(*([z1] * q), indexing="ij")
        Zk = np.stack([g.ravel() for g in zg], axis=1)  # (K, q)
        wg = np.meshgrid(*([w1] * q), indexing="ij")
        Wk = np.prod(np.stack([g.ravel() for g in wg]), axis=0)
        self.K = Zk.shape[0]
        self.log_wz = np.log(Wk) + (Zk**2).sum(axis=1)

        b1 = np.concatenate([stage1.beta, stage1.zeta])
        self.U = np.empty((N, self.K, q))
        self.log_det_scale = np.empty(N)
        for i, s in enumerate(subjects):
            mean, cov = _posterior_moments(s, spec, b1, stage1.re_chol, stage1.sigma2)
            cov = cov + 1e-10 * max(1.0, float(np.trace(cov))) * np.eye(q)
            P = psd_factor(cov)
            self.U[i] = mean[None, :] + math.sqrt(2.0) * (Zk @ P.T)
            self.log_det_scale[i] = (q / 2.0) * math.log(2.0) + 0.5 * np.linalg.slogdet(cov)[1]

        self._chunk = max(1, int(chunk_entries // max(self.K * n_time, 1)))

    def _fixed_design(self, s: SubjectRecord, t: np.ndarray) -> np.ndarray:
        F = evaluate_basis(self.spec.fixed_basis, t)
        if not self.spec.extra_regressors:
            return F
        G = np.column_stack(
            [np.asarray(r.at_times(s, t), dtype=float) for r in self.spec.extra_regressors]
        )
        return np.hstack([F, G])

    def pack(self, b, re_chol, sigma2, gamma, baseline_log_params) -> np.ndarray:
        return np.concatenate([
            np.asarray(b, float),
            np.asarray(re_chol, float)[self._tril],
            [0.5 * math.log(max(sigma2 - SIGMA2_FLOOR, 1e-300))],
            [gamma],
            np.asarray(baseline_log_params, float),
        ])

    def unpack(self, theta: np.ndarray):
        b = theta[: self.p]
        L = np.zeros((self.q, self.q))
        L[self._tril] = theta[self.idx_ell]
        sigma2 = SIGMA2_FLOOR + math.exp(min(2.0 * float(theta[self.idx_s]), 700.0))
        gamma = float(theta[self.idx_gamma])
        return b, L, sigma2, gamma, np.asarray(theta[self.idx_base])

    def _eval(self, theta: np.ndarray, want_grad: bool):
        b, L, sigma2, gamma, tb = self.unpack(theta)
        try:
            Lb = cholesky(L @ L.T + 1e-300 * np.eye(self.q))
        except CholeskyError:
            return (-np.inf, None) if want_grad else (-np.inf, None)
        logdetB = 2.0 * float(np.log(np.abs(np.diag(L)) + 1e-300).sum())
        ll = 0.0
        grad = np.zeros(self.n_params) if want_grad else None
        dsig = math.exp(min(2.0 * float(theta[self.idx_s]), 700.0))
        SL = np.zeros((self.q, self.q))  # accumulates pi-weighted B^-1 u u' B^-1

        for lo in range(0, self.N, self._chunk):
            sl = slice(lo, min(lo + self._chunk, self.N))
            U = self.U[sl]  # (n, K, q)
            n, K, q = U.shape
            n_vis = self.n_vis[sl]
            # longitudinal sum of squares ||y - X b - Z u||^2 per node
            rx = self.Sxy[sl] - self.Sxx[sl] @ b  # X'(y - Xb)
            ss0 = self.Syy[sl] - 2.0 * self.Sxy[sl] @ b + (self.Sxx[sl] @ b) @ b
            szr = self.Szy[sl] - self.Szx[sl] @ b  # Z'(y - Xb)
            UZz = U @ self.Szz[sl]  # (n, K, q)
            SS = ss0[:, None] - 2.0 * (U @ szr[:, :, None])[:, :, 0] + (UZz * U).sum(-1)
            with np.errstate(divide="ignore"):
                long_part = -0.5 * (n_vis * (LOG2PI + math.log(sigma2)))[:, None] - 0.5 * SS / sigma2

            # survival part
            logh_T, dlogh_T = self.bmap.log_hazard_partials(tb, self.T[sl])
            logh_s, dlogh_s = self.bmap.log_hazard_partials(tb, self.s_nodes[sl])
            XT = (self.FT[sl] @ b)[:, None] + (U @ self.ZT[sl][:, :, None])[:, :, 0]  # (n, K)
            Xs = (self.Fs[sl] @ b)[:, None, :] + U @ self.Zs[sl].transpose(0, 2, 1)  # (n, K, t)
            wlam = self.s_weights[sl] * np.exp(np.minimum(logh_s, 200.0))  # (n, t)
            wegx = np.exp(np.minimum(gamma * Xs, 700.0))
            wegx *= wlam[:, None, :]  # w_t lambda_0(s_t) e^{gamma X(s_t)}
            Lam = wegx.sum(-1)
            surv_part = self.E[sl][:, None] * (logh_T[:, None] + gamma * XT) - Lam

            # random-effect prior
            flatU = U.reshape(-1, q).T
            a = solve_triangular(Lb, flatU, lower=True)
            a = solve_triangular(Lb.T, a, lower=False)  # B^-1 u, (q, n*K)
            quad_u = (flatU * a).sum(axis=0).reshape(n, K)
            prior = -0.5 * (self.q * LOG2PI + logdetB) - 0.5 * quad_u

            g = self.log_wz[None, :] + long_part + surv_part + prior
            lse = logsumexp(g, axis=1)
            ll += float((lse + self.log_det_scale[sl]).sum())
            if not want_grad:
                continue

            pi = np.exp(g - lse[:, None])  # (n, K)
            # fixed effects: longitudinal residual part, event part, hazard part
            d_b = (rx[:, None, :] - U @ self.Szx[sl]) / sigma2
            d_b += (gamma * self.E[sl])[:, None, None] * self.FT[sl][:, None, :]
            d_b -= gamma * (wegx @ self.Fs[sl])
            grad[: self.p] += pi.ravel() @ d_b.reshape(n * K, self.p)
            # log sigma
            d_s = (-0.5 * n_vis[:, None] / sigma2 + 0.5 * SS / sigma2**2) * 2.0 * dsig
            grad[self.idx_s] += float((pi * d_s).sum())
            # gamma
            d_g = self.E[sl][:, None] * XT - ((wegx * Xs) @ np.ones(Xs.shape[-1]))
            grad[self.idx_gamma] += float((pi * d_g).sum())
            # baseline
            for j in range(self.bmap.n_params):
                d_bl = self.E[sl][:, None] * dlogh_T[j][:, None] - (
                    wegx @ dlogh_s[j][:, :, None]
                )[:, :, 0]
                grad[self.idx_base][j] += float((pi * d_bl).sum())
            # chol(B): accumulate pi-weighted outer products of B^-1 u
            a2 = a.T  # (n*K, q)
            SL += (a2 * pi.reshape(-1, 1)).T @ a2

        if want_grad:
            Binv = solve_triangular(Lb, np.eye(self.q), lower=True)
            Binv = Binv.T @ Binv
            GB = 0.5 * (SL - self.N * Binv)
            grad[self.idx_ell] += (2.0 * GB @ L)[self._tril]
        return ll, grad

    def loglik(self, theta) -> float:
        return self._eval(np.asarray(theta, float), want_grad=False)[0]

    def gradient(self, theta) -> np.ndarray:
        return self._eval(np.asarray(theta, float), want_grad=True)[1]


def _initial_baseline(bmap: _BaselineMap, c: Cohort) -> np.ndarray:
    followup = sum(s.event_time for s in c.subjects)
    rate = max(c.n_events, 1) / max(followup, 1e-12)
    if bmap.family == "weibull":
        # marginal censored-Weibull MLE ignoring the exposure gives a start
        # close to the joint optimum; tiny 2-parameter problem
        T = np.array([s.event_time for s in c.subjects])
        E = np.array([s.event for s in c.subjects], dtype=float)
        logT = np.log(np.maximum(T, 1e-12))

        def marginal_ll(theta):
            a, cc = theta
            k = math.exp(min(float(a), 60.0))
            z = np.minimum(k * (logT - cc), 700.0)
            return float((E * (a + z - logT)).sum() - np.exp(z).sum())

        res = maximize(marginal_ll, [0.0, -math.log(rate)], tolerance=1e-6,
                       max_iter=200, compute_hessian=False)
        return res.argmax
    return np.full(bmap.n_params, math.log(rate))


def fit_joint_model(
    c: Cohort,
    spec: LmmSpec,
    baseline_family: str = "weibull",
    n_quad: int = 9,
    n_time: int = 15,
    tol: float = 1e-3,
    max_iter: int = 500,
    stage1: Optional[LmmFit] = None,
    gamma_init: float = 0.0,
    fix_gamma: Optional[float] = None,
) -> JmFit:
    """Maximize the joint marginal likelihood.

    Initialized from the stage-1 mixed model (also the source of the
    pseudo-adaptive quadrature centers) and a supplied association start.
    ``fix_gamma`` pins the association parameter (used to check that the
    likelihood factorizes at gamma = 0). Raises :class:`JmError` with the
    iterate trace on non-convergence or a non-positive-definite Hessian.
    """
    if c.n_events < 1:
        raise JmError("joint model requires at least one event")
    if stage1 is None:
        stage1 = fit_lmm(c, spec)
    if baseline_family == "piecewise_constant":
        times = np.array([s.event_time for s in c.subjects if s.event])
        cuts = tuple(np.quantile(times, np.linspace(0, 1, 7)[1:-1]))
        bmap = _BaselineMap(baseline_family, cuts)
    else:
        bmap = _BaselineMap(baseline_family)
    lik = JointLikelihood(c, spec, stage1, bmap, n_quad=n_quad, n_time=n_time)

    theta0 = lik.pack(
        np.concatenate([stage1.beta, stage1.zeta]),
        stage1.re_chol,
        stage1.sigma2,
        fix_gamma if fix_gamma is not None else gamma_init,
        _initial_baseline(bmap, c),
    )

    if fix_gamma is None:
        objective, gradient = lik.loglik, lik.gradient
        start = theta0
    else:
        free = np.array([i for i in range(lik.n_params) if i != lik.idx_gamma])

        def embed(th):
            full = theta0.copy()
            full[free] = th
            return full

        objective = lambda th: lik.loglik(embed(th))
        gradient = lambda th: lik.gradient(embed(th))[free]
        start = theta0[free]

    res = maximize(objective, start, tolerance=tol, gradient=gradient, max_iter=max_iter,
                   compute_hessian=False, precondition=True)
    if not res.converged:
        raise JmError(
            f"joint likelihood did not converge (gradient max-norm {res.gradient_max:.3g})",
            trace=res.trace,
        )
    theta = embed(res.argmax) if fix_gamma is not None else res.argmax

    hess = fd_hessian(lambda th: -lik.loglik(th), theta, gradient=lambda th: -lik.gradient(th))
    b, L, sigma2, gamma, tb = lik.unpack(theta)
    flat = [lik.idx_s] if sigma2 < 10.0 * SIGMA2_FLOOR else []
    if fix_gamma is not None:
        flat.append(lik.idx_gamma)
    try:
        param_cov = pd_inverse(hess, drop_flat=flat)
    except CholeskyError as exc:
        raise JmError(f"Hessian not positive definite at the optimum ({exc})", trace=res.trace)

    n_basis = spec.fixed_basis.dimension
    return JmFit(
        beta=b[:n_basis],
        zeta=b[n_basis:],
        re_cov=L @ L.T,
        sigma2=sigma2,
        gamma=gamma,
        baseline=bmap.make(tb),
        param_cov=param_cov,
        loglik=res.value,
        gamma_index=lik.idx_gamma,
        n_quad=n_quad,
    )
