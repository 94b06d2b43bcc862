"""Cox partial-likelihood estimation with functionally evaluated time-varying
covariates, the Nelson-Aalen estimator, and parametric baseline hazards.

The partial likelihood uses Breslow tie handling. Covariate paths are
evaluated lazily at the distinct event times (no long-format expansion);
``CoxProblem`` exposes the same machinery on a precomputed value matrix so
bootstrap loops can rebuild paths cheaply.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Optional, Sequence

import numpy as np

from .data_model import Cohort, ExposurePath


class CoxError(RuntimeError):
    pass


class SeparationError(CoxError):
    """Monotone partial likelihood: some coefficient diverges."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class NonIdentifiableError(CoxError):
    """A covariate shows no variation within any risk set."""


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous nondecreasing step function, 0 before the first jump."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.size != v.size:
            raise ValueError("times and values must have equal length")
        if t.size > 1 and (np.any(np.diff(t) <= 0) or np.any(np.diff(v) < 0)):
            raise ValueError("jump times must increase, values must be nondecreasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate([[0.0], self.values])
        return padded[idx]


@dataclass(frozen=True, eq=False)
class ParametricBaseline:
    """Baseline hazard family with positive parameters.

    exponential(rate): constant hazard. weibull(shape, scale): hazard
    (shape/scale)(t/scale)^(shape-1). piecewise_constant(cuts, rates):
    rates[j] on [cuts[j-1], cuts[j]).
    """

    family: Literal["exponential", "weibull", "piecewise_constant"]
    params: tuple[float, ...]
    cuts: tuple[float, ...] = ()

    def __post_init__(self):
        if any(p <= 0.0 for p in self.params):
            raise ValueError("baseline parameters must be positive")
        if self.family == "piecewise_constant":
            if len(self.params) != len(self.cuts) + 1:
                raise ValueError("piecewise baseline needs len(cuts)+1 rates")
            c = np.asarray(self.cuts)
            if c.size and (c[0] <= 0 or np.any(np.diff(c) <= 0)):
                raise ValueError("cuts must be positive and strictly increasing")
        elif self.family == "exponential":
            if len(self.params) != 1:
                raise ValueError("exponential baseline takes a single rate")
        elif self.family == "weibull":
            if len(self.params) != 2:
                raise ValueError("weibull baseline takes (shape, scale)")
        else:
            raise ValueError(f"unknown baseline family {self.family!r}")

    @staticmethod
    def exponential(rate: float) -> "ParametricBaseline":
        return ParametricBaseline("exponential", (float(rate),))

    @staticmethod
    def weibull(shape: float, scale: float) -> "ParametricBaseline":
        return ParametricBaseline("weibull", (float(shape), float(scale)))

    @staticmethod
    def piecewise_constant(cuts: Sequence[float], rates: Sequence[float]) -> "ParametricBaseline":
        return ParametricBaseline(
            "piecewise_constant", tuple(float(r) for r in rates), tuple(float(c) for c in cuts)
        )

    def hazard(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.family == "exponential":
            return np.full_like(t, self.params[0])
        if self.family == "weibull":
            shape, scale = self.params
            with np.errstate(divide="ignore"):
                return (shape / scale) * (t / scale) ** (shape - 1.0)
        idx = np.searchsorted(np.asarray(self.cuts), t, side="right")
        return np.asarray(self.params)[idx]

    def cum_hazard(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.family == "exponential":
            return self.params[0] * t
        if self.family == "weibull":
            shape, scale = self.params
            return (t / scale) ** shape
        edges = np.concatenate([[0.0], np.asarray(self.cuts)])
        rates = np.asarray(self.params)
        widths = np.diff(edges)
        cum_at_edges = np.concatenate([[0.0], np.cumsum(rates[: len(widths)] * widths)])
        idx = np.searchsorted(np.asarray(self.cuts), t, side="right")
        return cum_at_edges[idx] + rates[idx] * (t - edges[idx])

    def log_hazard(self, t) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.hazard(t))


@dataclass(frozen=True, eq=False)
class CoxFit:
    """Cox partial-likelihood fit.

    ``se_naive`` comes from the inverse observed information and ignores any
    stage-1 estimation uncertainty in the covariate paths; two-stage
    pipelines must replace it with a bootstrap-based total SE.
    """

    gamma: np.ndarray
    se_naive: np.ndarray
    loglik: float
    n_events: int

    def __post_init__(self):
        if self.n_events < 1:
            raise CoxError("a Cox fit requires at least one event")
        if np.any(np.asarray(self.se_naive) <= 0):
            raise CoxError("non-positive standard error")


@lru_cache(maxsize=16)
def _leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


class CoxProblem:
    """Breslow partial likelihood over a (subject x event-time) value matrix.

    ``values[i, k]`` is subject i's covariate of interest evaluated at the
    k-th distinct event time; ``extra`` holds optional time-fixed columns.
    """

    def __init__(
        self,
        values: np.ndarray,
        times: np.ndarray,
        events: np.ndarray,
        extra: Optional[np.ndarray] = None,
    ):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        if not events.any():
            raise CoxError("zero events: partial likelihood undefined")
        self.event_times, self.d = np.unique(times[events], return_counts=True)
        self.risk_mask = times[:, None] >= self.event_times[None, :]
        self.values = np.where(self.risk_mask, np.asarray(values, dtype=float), 0.0)
        self.extra = None if extra is None else np.asarray(extra, dtype=float)
        self.n_events = int(events.sum())
        cols = [self.values]
        if self.extra is not None:
            n, e = self.values.shape
            cols += [np.broadcast_to(self.extra[:, j : j + 1], (n, e)) for j in range(self.extra.shape[1])]
        self._cols = cols
        self.n_params = len(cols)
        # sufficient statistic: each event subject's covariates at its own time
        kidx = np.searchsorted(self.event_times, times)
        ev = np.flatnonzero(events)
        self.numsum = np.array([c[ev, kidx[ev]].sum() for c in cols])
        self._scale = np.array(
            [max(float(c[self.risk_mask].std()), 1e-12) for c in cols]
        )

    def loglik_grad_hess(self, theta) -> tuple[float, np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        eta = sum(th * c for th, c in zip(theta, self._cols))
        eta = np.where(self.risk_mask, eta, -np.inf)
        m = eta.max(axis=0)
        w = np.exp(eta - m[None, :]) * self.risk_mask
        s0 = w.sum(axis=0)
        s1 = np.stack([(w * c).sum(axis=0) for c in self._cols])  # (P, E)
        ll = float(self.numsum @ theta - self.d @ (np.log(s0) + m))
        r1 = s1 / s0[None, :]
        grad = self.numsum - r1 @ self.d
        P = self.n_params
        hess = np.empty((P, P))
        for p in range(P):
            wp = w * self._cols[p]
            for q in range(p, P):
                s2 = (wp * self._cols[q]).sum(axis=0) / s0
                hpq = -float(self.d @ (s2 - r1[p] * r1[q]))
                hess[p, q] = hess[q, p] = hpq
        return ll, grad, hess

    def loglik(self, theta) -> float:
        return self.loglik_grad_hess(theta)[0]

    def fit(self, tol: float = 1e-9, max_iter: int = 60) -> CoxFit:
        theta = np.zeros(self.n_params)
        ll, grad, hess = self.loglik_grad_hess(theta)
        info0 = -np.diag(hess)
        flat = info0 <= 1e-12 * np.maximum(1.0, self.n_events * self._scale**2)
        if flat.any():
            raise NonIdentifiableError(
                f"covariate {int(np.flatnonzero(flat)[0])} has no variation within risk sets"
            )
        trace = [theta.copy()]
        for _ in range(max_iter):
            if float(np.abs(grad).max()) < tol * max(1.0, self.n_events):
                se = np.sqrt(np.diag(np.linalg.inv(-hess)))
                return CoxFit(gamma=theta, se_naive=se, loglik=ll, n_events=self.n_events)
            step = np.linalg.solve(-hess, grad)
            alpha = 1.0
            for _ in range(40):
                cand = theta + alpha * step
                ll_new, grad_new, hess_new = self.loglik_grad_hess(cand)
                if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                    break
                alpha *= 0.5
            theta, ll, grad, hess = cand, ll_new, grad_new, hess_new
            trace.append(theta.copy())
            # a coefficient of 8 per covariate SD means hazard ratios beyond
            # e^16 across the risk sets: monotone likelihood, not an estimate
            if np.any(np.abs(theta) * self._scale > 8.0):
                raise SeparationError(
                    "monotone partial likelihood (perfect separation): coefficient diverges",
                    trace=np.array(trace),
                )
        raise SeparationError(
            "partial-likelihood maximization did not converge", trace=np.array(trace)
        )

    @staticmethod
    def from_paths(
        c: Cohort,
        paths: Sequence[ExposurePath],
        fixed_covariates: Optional[Sequence[str]] = None,
    ) -> "CoxProblem":
        times = np.array([s.event_time for s in c.subjects])
        events = np.array([s.event for s in c.subjects])
        if not events.any():
            raise CoxError("zero events: partial likelihood undefined")
        grid = np.unique(times[events])
        values = np.vstack([np.atleast_1d(p(grid)) for p in paths])
        extra = c.covariate_matrix(fixed_covariates) if fixed_covariates else None
        return CoxProblem(values, times, events, extra=extra)


def partial_loglik(
    c: Cohort,
    paths: Sequence[ExposurePath],
    theta,
    fixed_covariates: Optional[Sequence[str]] = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """(log partial likelihood, gradient, Hessian) at theta."""
    return CoxProblem.from_paths(c, paths, fixed_covariates).loglik_grad_hess(theta)


def fit_cox(
    c: Cohort,
    paths: Sequence[ExposurePath],
    fixed_covariates: Optional[Sequence[str]] = None,
    tol: float = 1e-9,
    max_iter: int = 60,
) -> CoxFit:
    """Maximize the Breslow partial likelihood with time-varying covariate
    paths evaluated at each distinct event time.

    ``paths`` is aligned with ``c.subjects``. Raises
    :class:`SeparationError` on a monotone likelihood and
    :class:`NonIdentifiableError` when the exposure carries no risk-set
    contrast.
    """
    return CoxProblem.from_paths(c, paths, fixed_covariates).fit(tol=tol, max_iter=max_iter)


def nelson_aalen(c: Cohort) -> StepFunction:
    """Nelson-Aalen cumulative-hazard estimator: sum of d_k / n_k over event
    times up to t. No events gives the zero function."""
    times = np.array([s.event_time for s in c.subjects])
    events = np.array([s.event for s in c.subjects])
    if not events.any():
        return StepFunction(times=np.array([]), values=np.array([]))
    te, d = np.unique(times[events], return_counts=True)
    at_risk = (times[:, None] >= te[None, :]).sum(axis=0)
    return StepFunction(times=te, values=np.cumsum(d / at_risk))


def cumulative_hazard(
    b: ParametricBaseline, path: ExposurePath, gamma: float, t: float, n_nodes: int = 24
) -> float:
    """Integral of baseline hazard times exp(gamma * path(s)) over [0, t].

    Closed form when gamma == 0 or the path is constant; otherwise
    Gauss-Legendre quadrature split at baseline cuts and path jumps.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0.0:
        return 0.0
    if gamma == 0.0:
        return float(b.cum_hazard(t))
    if path.constant_value is not None:
        return float(np.exp(gamma * path.constant_value) * b.cum_hazard(t))
    breaks = np.array(sorted({0.0, float(t)} | {c for c in b.cuts if 0.0 < c < t}
                             | {j for j in path.jumps if 0.0 < j < t}))
    x, w = _leggauss(n_nodes)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    half = 0.5 * np.diff(breaks)
    nodes = mid[:, None] + half[:, None] * x[None, :]
    integrand = b.hazard(nodes) * np.exp(gamma * path(nodes))
    return float((half * (integrand @ w)).sum())
