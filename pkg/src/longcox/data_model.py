"""Domain types for longitudinal-survival data: visit histories, cohorts,
time-function bases, exposure paths, and CSV ingestion/validation.

All types are immutable after construction and safe to share across
processes. CSV layout (see README): the longitudinal file has columns
``id,time,value[,covariate...]``, the survival file ``id,event_time,event``
with event coded 0/1.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

import numpy as np


class CohortError(ValueError):
    """Base class for cohort validation failures."""


class UnknownSubjectError(CohortError):
    pass


class NonMonotoneVisitsError(CohortError):
    pass


class NegativeTimeError(CohortError):
    pass


class PostEventVisitError(CohortError):
    pass


@dataclass(frozen=True)
class Visit:
    """One exposure measurement: time in years since baseline, observed value."""

    time: float
    value: float


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    """One individual's visit history and survival outcome.

    ``visits`` are strictly increasing in time. ``event_time`` is the
    right-censored observed time; ``event`` is True for an observed event,
    False for censoring. Visits may be empty only after truncation at the
    event (such subjects stay in the risk sets but carry no stage-1 data).
    """

    id: str
    visits: tuple[Visit, ...]
    event_time: float
    event: bool
    baseline_covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.array([v.time for v in self.visits])
        if times.size and times.min() < 0.0:
            raise NegativeTimeError(f"subject {self.id}: negative visit time {times.min()}")
        if times.size > 1 and np.any(np.diff(times) <= 0.0):
            raise NonMonotoneVisitsError(f"subject {self.id}: visit times not strictly increasing")
        if not np.all(np.isfinite([v.value for v in self.visits])):
            raise CohortError(f"subject {self.id}: non-finite exposure value")
        if not (np.isfinite(self.event_time) and self.event_time > 0.0):
            raise CohortError(f"subject {self.id}: event_time must be positive and finite")

    @property
    def visit_times(self) -> np.ndarray:
        return np.array([v.time for v in self.visits])

    @property
    def visit_values(self) -> np.ndarray:
        return np.array([v.value for v in self.visits])

    @property
    def n_visits(self) -> int:
        return len(self.visits)


@dataclass(frozen=True, eq=False)
class Cohort:
    """Analysis sample: subjects plus bookkeeping flags.

    ``truncated_at_event`` marks that every visit time is <= the subject's
    event/censoring time (verified on ingestion in strict mode, or
    established by :func:`truncate_at_event`).
    """

    subjects: tuple[SubjectRecord, ...]
    truncated_at_event: bool = False
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate subject ids")
        for s in self.subjects:
            missing = [c for c in self.covariate_names if c not in s.baseline_covariates]
            if missing:
                raise CohortError(f"subject {s.id}: missing baseline covariates {missing}")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_events(self) -> int:
        return sum(s.event for s in self.subjects)

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.array([[s.baseline_covariates[c] for c in names] for s in self.subjects])


@dataclass(frozen=True)
class TimeBasis:
    """Vector of time functions F(t), intercept included.

    Polynomial bases have dimension degree+1. Natural cubic splines have
    dimension (number of interior knots)+2 and are linear beyond the
    boundary knots (zero second derivative at and outside them).
    """

    kind: Literal["polynomial", "natural_cubic_spline"]
    degree: int = 1
    interior_knots: tuple[float, ...] = ()
    boundary_knots: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind == "polynomial":
            if self.degree < 0:
                raise ValueError("polynomial degree must be >= 0")
        elif self.kind == "natural_cubic_spline":
            lo, hi = self.boundary_knots
            if not self.interior_knots:
                raise ValueError("natural cubic spline needs at least one interior knot")
            if not (lo < min(self.interior_knots) and max(self.interior_knots) < hi):
                raise ValueError("boundary knots must strictly bracket interior knots")
            if np.any(np.diff(self.interior_knots) <= 0):
                raise ValueError("interior knots must be strictly increasing")
        else:
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @property
    def dimension(self) -> int:
        if self.kind == "polynomial":
            return self.degree + 1
        return len(self.interior_knots) + 2

    @staticmethod
    def polynomial(degree: int) -> "TimeBasis":
        return TimeBasis(kind="polynomial", degree=degree)

    @staticmethod
    def natural_cubic_spline(
        interior_knots: Sequence[float], boundary_knots: Sequence[float]
    ) -> "TimeBasis":
        return TimeBasis(
            kind="natural_cubic_spline",
            interior_knots=tuple(float(k) for k in interior_knots),
            boundary_knots=(float(boundary_knots[0]), float(boundary_knots[1])),
        )

    @staticmethod
    def spline_from_cohort(cohort: Cohort, n_interior: int = 1) -> "TimeBasis":
        """Interior knots at visit-time quantiles, boundaries at min/max."""
        times = np.concatenate([s.visit_times for s in cohort.subjects if s.n_visits])
        qs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        interior = np.quantile(times, qs)
        lo, hi = float(times.min()), float(times.max())
        return TimeBasis.natural_cubic_spline(interior, (lo, hi))


def evaluate_basis(basis: TimeBasis, t) -> np.ndarray:
    """Evaluate F(t): output shape is t.shape + (dimension,), so a scalar t
    gives a vector. First element is always the intercept 1."""
    tv = np.asarray(t, dtype=float)
    shape = tv.shape
    flat = tv.ravel()
    if basis.kind == "polynomial":
        out = np.vander(flat, basis.degree + 1, increasing=True)
    else:
        knots = np.array([basis.boundary_knots[0], *basis.interior_knots, basis.boundary_knots[1]])
        K = knots.size
        cube = np.clip(flat[:, None] - knots[None, :], 0.0, None) ** 3  # (n, K)
        d = (cube[:, : K - 1] - cube[:, K - 1 : K]) / (knots[K - 1] - knots[: K - 1])
        cols = [np.ones_like(flat), flat]
        for k in range(K - 2):
            cols.append(d[:, k] - d[:, K - 2])
        out = np.column_stack(cols)
    return out.reshape(shape + (basis.dimension,))


@dataclass(eq=False)
class ExposurePath:
    """A subject's exposure as a function of time on [0, horizon].

    Wraps a vectorized callable; ``constant_value`` is set when the path is
    known constant (enables closed-form cumulative hazards), ``jumps`` lists
    discontinuity times for step paths so integrators can split there.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    horizon: float
    constant_value: Optional[float] = None
    jumps: tuple[float, ...] = ()

    def __call__(self, t) -> np.ndarray:
        return self.fn(np.asarray(t, dtype=float))


def step_path(times: np.ndarray, values: np.ndarray, horizon: float) -> ExposurePath:
    """Last-observation-carried-forward path: values[j] on [times[j], times[j+1])."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size == 0:
        raise ValueError("step path needs at least one observation")

    def fn(t):
        idx = np.searchsorted(times, t, side="right") - 1
        return values[np.clip(idx, 0, values.size - 1)]

    const = float(values[0]) if np.all(values == values[0]) else None
    return ExposurePath(fn=fn, horizon=horizon, constant_value=const, jumps=tuple(times[1:]))


def basis_path(
    basis: TimeBasis,
    coef: np.ndarray,
    horizon: float,
    extra: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> ExposurePath:
    """Smooth path F(t)' coef, plus an optional additive term (e.g. G(t)' zeta)."""
    coef = np.asarray(coef, dtype=float)

    def fn(t):
        out = evaluate_basis(basis, t) @ coef
        if extra is not None:
            out = out + extra(np.asarray(t, dtype=float))
        return out

    return ExposurePath(fn=fn, horizon=horizon)


def truncate_at_event(c: Cohort) -> Cohort:
    """Drop every visit strictly after the subject's event/censoring time.

    Idempotent; survival fields are never altered. Subjects left with no
    visit are retained (they stay in the risk sets but contribute no
    longitudinal information).
    """
    subjects = []
    for s in c.subjects:
        kept = tuple(v for v in s.visits if v.time <= s.event_time)
        subjects.append(replace(s, visits=kept) if len(kept) != s.n_visits else s)
    return Cohort(
        subjects=tuple(subjects), truncated_at_event=True, covariate_names=c.covariate_names
    )


def _read_rows(path: Path, required: Sequence[str]) -> tuple[list[dict], list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise CohortError(f"{path}: missing required columns {missing}")
        return list(reader), list(header)


def read_cohort(longitudinal_csv, survival_csv, strict: bool = True) -> Cohort:
    """Load and validate a cohort from the two-file CSV layout.

    Longitudinal rows with a missing exposure value are dropped with a
    counted warning. ``strict`` additionally rejects visits recorded after
    the subject's event time (set False for post-event exposure data).
    """
    long_rows, long_header = _read_rows(Path(longitudinal_csv), ["id", "time", "value"])
    surv_rows, _ = _read_rows(Path(survival_csv), ["id", "event_time", "event"])
    if not long_rows:
        raise CohortError(f"{longitudinal_csv}: no visits")

    covariate_names = tuple(c for c in long_header if c not in ("id", "time", "value"))
    survival = {}
    for row in surv_rows:
        sid = row["id"]
        if sid in survival:
            raise CohortError(f"duplicate id {sid} in survival file")
        ev = row["event"].strip()
        if ev not in ("0", "1"):
            raise CohortError(f"subject {sid}: event must be 0 or 1, got {ev!r}")
        survival[sid] = (float(row["event_time"]), ev == "1")

    visits: dict[str, list[tuple[float, float]]] = {sid: [] for sid in survival}
    covs: dict[str, dict] = {sid: {} for sid in survival}
    n_dropped = 0
    for row in long_rows:
        sid = row["id"]
        if sid not in survival:
            raise UnknownSubjectError(f"subject {sid} appears in longitudinal file only")
        raw = (row["value"] or "").strip()
        if raw in ("", "NA", "NaN", "nan"):
            n_dropped += 1
            continue
        visits[sid].append((float(row["time"]), float(raw)))
        if not covs[sid]:
            covs[sid] = {c: float(row[c]) for c in covariate_names}
    if n_dropped:
        warnings.warn(f"dropped {n_dropped} visits with missing exposure value", stacklevel=2)

    subjects = []
    for sid, (event_time, event) in survival.items():
        vs = visits[sid]
        if not vs:
            raise CohortError(f"subject {sid}: no visits")
        times = [t for t, _ in vs]
        if strict and max(times) > event_time:
            raise PostEventVisitError(
                f"subject {sid}: visit at t={max(times)} after event_time={event_time}"
            )
        subjects.append(
            SubjectRecord(
                id=sid,
                visits=tuple(Visit(t, v) for t, v in vs),
                event_time=event_time,
                event=event,
                baseline_covariates=covs[sid],
            )
        )
    return Cohort(
        subjects=tuple(subjects), truncated_at_event=strict, covariate_names=covariate_names
    )


def write_cohort(c: Cohort, longitudinal_csv, survival_csv) -> None:
    """Inverse of :func:`read_cohort` (full float precision round-trip)."""
    with open(longitudinal_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "value", *c.covariate_names])
        for s in c.subjects:
            covs = [repr(float(s.baseline_covariates[n])) for n in c.covariate_names]
            for v in s.visits:
                writer.writerow([s.id, repr(float(v.time)), repr(float(v.value)), *covs])
    with open(survival_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "event_time", "event"])
        for s in c.subjects:
            writer.writerow([s.id, repr(float(s.event_time)), int(s.event)])
