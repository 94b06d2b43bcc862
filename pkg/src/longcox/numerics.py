"""Numeric kernel: dense Cholesky, quasi-Newton maximization, Gauss-Hermite
quadrature, bracketed root finding, and reproducible seeded random streams.

All routines are deterministic given their inputs. ``RngStream`` is the only
stateful object; callers that run in parallel must derive distinct streams
(``child`` / distinct ``stream_id``) rather than sharing one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence
from scipy.optimize import brentq

_MASK64 = (1 << 64) - 1

# central-difference step ~ cbrt(machine eps), scaled by parameter magnitude
FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)


class CholeskyError(np.linalg.LinAlgError):
    """Factorization failed: the matrix is not positive definite."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix not positive definite: pivot {pivot} non-positive")


class BracketError(ValueError):
    """Root finder called without a sign change on the bracket."""


def _as_matrix(a) -> np.ndarray:
    m = np.asarray(getattr(a, "entries", a), dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky(a) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a.

    Accepts an ``SpdMatrix`` or a plain symmetric array. Raises
    :class:`CholeskyError` naming the failing pivot (1-based) when the input
    is not positive definite.
    """
    m = _as_matrix(a)
    n = m.shape[0]
    L = np.zeros_like(m)
    for j in range(n):
        d = m[j, j] - L[j, :j] @ L[j, :j]
        if not np.isfinite(d) or d <= 0.0:
            raise CholeskyError(j + 1)
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (m[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def psd_factor(a) -> np.ndarray:
    """Factor M with M @ M.T == a for symmetric positive *semi*definite a.

    Eigenvalue-based, so zero (or numerically tiny negative) eigenvalues are
    tolerated; used for degenerate draws where a strict Cholesky would fail.
    """
    m = _as_matrix(a)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    tol = max(1e-12, 1e-12 * float(abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * max(1.0, abs(w).max(initial=0.0)):
        raise CholeskyError(int(np.argmin(w)) + 1)
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """Symmetric positive-definite matrix (validated on construction)."""

    entries: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.entries)
        scale = max(1.0, float(abs(m).max()))
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * scale):
            raise ValueError("matrix is not symmetric to 1e-12 relative")
        object.__setattr__(self, "entries", 0.5 * (m + m.T))
        cholesky(self.entries)  # PD check, raises CholeskyError

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def chol(self) -> np.ndarray:
        return cholesky(self.entries)


@dataclass(eq=False)
class RngStream:
    """Reproducible random stream keyed by (seed, stream_id).

    Two streams constructed with the same key produce identical draw
    sequences; distinct keys give statistically independent streams
    (PCG64 seeded through numpy's SeedSequence). ``child(k)`` derives an
    independent sub-stream, used to give bootstrap draws, imputations and
    simulated subjects their own lineage.
    """

    seed: int
    stream_id: int = 0
    _path: tuple = ()
    generator: Generator = field(init=False, repr=False)

    def __post_init__(self):
        # path elements are stored offset by one: SeedSequence zero-pads its
        # entropy, so a trailing zero word would collide with the parent
        entropy = (self.seed & _MASK64, self.stream_id & _MASK64) + tuple(
            (k + 1) & _MASK64 for k in self._path
        )
        self.generator = Generator(PCG64(SeedSequence(entropy)))

    def child(self, k: int) -> "RngStream":
        if k < 0:
            raise ValueError("child index must be nonnegative")
        return RngStream(self.seed, self.stream_id, self._path + (k,))


def draw_normal(stream: RngStream, mean, chol_cov) -> np.ndarray:
    """mean + chol_cov @ z with z i.i.d. standard normal from the stream."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    chol_cov = np.asarray(chol_cov, dtype=float)
    if chol_cov.shape != (mean.size, mean.size):
        raise ValueError(
            f"covariance factor shape {chol_cov.shape} does not match mean of length {mean.size}"
        )
    z = stream.generator.standard_normal(mean.size)
    return mean + chol_cov @ z


def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point Gauss-Hermite rule (weight e^{-x^2}).

    Exact for polynomials of degree <= 2n-1; weights sum to sqrt(pi).
    """
    if not 1 <= n <= 50:
        raise ValueError(f"gauss_hermite order must be in [1, 50], got {n}")
    return np.polynomial.hermite.hermgauss(n)


def brent_root(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> float:
    """Root of f on [lo, hi]; requires f(lo) * f(hi) <= 0."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={flo}, f(hi)={fhi}")
    return float(brentq(f, lo, hi, xtol=tol))


@dataclass
class OptimResult:
    """Outcome of :func:`maximize`.

    ``hessian`` is the Hessian of the *negative* objective at the optimum
    (positive definite at a proper interior maximum). ``trace`` records the
    objective value at each accepted iterate, for convergence forensics.
    """

    argmax: np.ndarray
    value: float
    hessian: np.ndarray
    converged: bool
    iterations: int
    gradient_max: float
    trace: np.ndarray


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
    """Central-difference gradient with per-coordinate scaled steps."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = FD_STEP * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_hessian(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Central-difference Hessian of f at x.

    Differences the analytic gradient when one is supplied (one order more
    accurate); otherwise uses second differences of f itself.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    if gradient is not None:
        for i in range(n):
            h = FD_STEP * (1.0 + abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            H[:, i] = (gradient(xp) - gradient(xm)) / (2.0 * h)
        return 0.5 * (H + H.T)
    f0 = f(x)
    hs = FD_STEP ** 0.75 * (1.0 + np.abs(x))  # larger step: second differences
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = hs[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / hs[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = hs[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * hs[i] * hs[j])
    return H


_MAX_HALVINGS = 60


def maximize(
    objective: Callable[[np.ndarray], float],
    start,
    tolerance: float = 1e-6,
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    max_iter: int = 500,
    compute_hessian: bool = True,
    precondition: bool = False,
) -> OptimResult:
    """Maximize a smooth objective by BFGS with a backtracking line search.

    Convergence is declared when the gradient max-norm falls below
    ``tolerance``. A non-finite objective during the line search triggers
    step halving; after a bounded number of halvings the search gives up and
    the result is returned with ``converged=False`` at the best iterate.
    When no analytic ``gradient`` is supplied, central finite differences are
    used for both gradient and final Hessian. ``precondition`` seeds the
    inverse-Hessian approximation with finite-difference diagonal curvatures
    (worth the extra 2n evaluations on badly scaled likelihoods).
    """
    x = np.atleast_1d(np.asarray(start, dtype=float)).copy()
    neg = lambda z: -objective(z)
    if gradient is not None:
        neg_grad = lambda z: -np.asarray(gradient(z), dtype=float)
    else:
        neg_grad = lambda z: fd_gradient(neg, z)

    f = neg(x)
    if not np.isfinite(f):
        raise ValueError("objective not finite at the starting point")
    g = neg_grad(x)
    n = x.size
    if precondition:
        curv = np.empty(n)
        for i in range(n):
            h = FD_STEP ** 0.5 * (1.0 + abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            curv[i] = (neg(xp) - 2.0 * f + neg(xm)) / h**2
        good = np.isfinite(curv) & (curv > 0)
        fallback = float(np.median(curv[good])) if good.any() else 1.0
        curv = np.where(good, curv, max(fallback, 1e-8))
        H = np.diag(1.0 / curv)
    else:
        # scaled so the first trial step has roughly unit length even when
        # the gradient is large
        H = np.eye(n) / max(1.0, float(np.abs(g).max()))
    trace = [-f]
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        gmax = float(np.abs(g).max())
        if gmax < tolerance:
            converged = True
            break
        d = -H @ g
        if d @ g >= 0.0:  # not a descent direction: reset curvature
            H = np.eye(n)
            d = -g
        slope = d @ g
        alpha = 1.0
        f_new = np.inf
        for _ in range(_MAX_HALVINGS):
            cand = x + alpha * d
            f_new = neg(cand)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            break  # line search exhausted; report best iterate, not converged
        s = alpha * d
        x_new = x + s
        g_new = neg_grad(x_new)
        y = g_new - g
        ys = y @ s
        if iterations == 1 and ys > 0 and not precondition:
            H *= ys / (y @ y)  # scale initial inverse Hessian
        if ys > 1e-12 * float(np.linalg.norm(y)) * float(np.linalg.norm(s)):
            rho = 1.0 / ys
            Hy = H @ y
            H -= rho * (np.outer(s, Hy) + np.outer(Hy, s))
            H += rho * (rho * (y @ Hy) + 1.0) * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        trace.append(-f)
    else:
        iterations = max_iter

    if compute_hessian:
        hess = fd_hessian(neg, x, gradient=(neg_grad if gradient is not None else None))
    else:
        hess = np.full((n, n), np.nan)
    return OptimResult(
        argmax=x,
        value=-f,
        hessian=hess,
        converged=converged,
        iterations=iterations,
        gradient_max=float(np.abs(g).max()),
        trace=np.asarray(trace),
    )


def pd_inverse(h: np.ndarray, drop_flat: Sequence[int] = ()) -> np.ndarray:
    """Inverse of a (nearly) positive-definite Hessian.

    Directions listed in ``drop_flat`` (0-based indices) are removed before
    inversion and their rows/columns of the result set to zero; used when a
    variance component sits on its boundary and carries no curvature.
    """
    h = np.asarray(h, dtype=float)
    keep = np.array([i for i in range(h.shape[0]) if i not in set(drop_flat)])
    out = np.zeros_like(h)
    if keep.size == 0:
        return out
    sub = h[np.ix_(keep, keep)]
    L = cholesky(0.5 * (sub + sub.T))  # raises CholeskyError if not PD
    inv = np.linalg.inv(L.T) @ np.linalg.inv(L)
    out[np.ix_(keep, keep)] = 0.5 * (inv + inv.T)
    return out
