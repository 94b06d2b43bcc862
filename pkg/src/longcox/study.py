"""Monte Carlo study runner: scenario x method grids over replicates,
performance metrics, and machine-readable / visual reports.

Replicate r derives every random draw from the stream (base_seed, r), so
reports are bit-identical regardless of the worker-pool size.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data_model import truncate_at_event
from .estimators import (
    METHODS,
    EstimateResult,
    EstimationError,
    Z975,
    estimate_jm,
    estimate_locf,
    estimate_mi,
    estimate_rc,
)
from .jm import JmError
from .lmm import LmmError, LmmSpec
from .numerics import RngStream
from .simulate import ScenarioConfig, generate, preset
from .survival import CoxError, ParametricBaseline


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StudyConfig:
    scenario: ScenarioConfig
    n_replicates: int = 200
    methods: tuple[str, ...] = METHODS
    base_seed: int = 0
    parallelism: int = 1
    n_boot: int = 500
    m_imputations: int = 10
    n_quad: int = 9
    baseline_family: str = "weibull"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")


@dataclass(frozen=True)
class MetricBlock:
    """Per-method performance over the converged replicates."""

    n_converged: int
    mean: float
    bias: float
    rel_bias_pct: float
    emp_sd: float
    mean_se: float
    coverage: float
    mse: float

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")
        # finite-sample identity: MSE = bias^2 + (n-1)/n * emp_sd^2, exact
        n = self.n_converged
        recon = self.bias**2 + (n - 1) / n * self.emp_sd**2
        if abs(self.mse - recon) > 1e-10 * max(1.0, self.mse):
            raise ValueError("MSE does not satisfy the bias-variance identity")


@dataclass(frozen=True)
class ReplicateRow:
    replicate: int
    method: str
    result: Optional[EstimateResult]
    error: str = ""


@dataclass(frozen=True, eq=False)
class StudyReport:
    label: str
    gamma_true: float
    methods: tuple[str, ...]
    n_replicates: int
    base_seed: int
    rows: tuple[ReplicateRow, ...]
    metrics: dict

    @property
    def all_methods_ok(self) -> bool:
        return all(self.metrics.get(m) is not None for m in self.methods)

    def estimates(self, method: str) -> list[EstimateResult]:
        return [r.result for r in self.rows if r.method == method and r.result is not None]


def compute_metrics(estimates: Sequence[EstimateResult], gamma_true: float) -> MetricBlock:
    """Bias, empirical SD, mean SE, 95% CI coverage, and MSE of a batch of
    estimates against the true association value."""
    if len(estimates) < 2:
        raise InsufficientDataError("need at least 2 successful estimates")
    g = np.array([e.gamma_hat for e in estimates])
    se = np.array([e.se_total for e in estimates])
    lo = np.array([e.ci95[0] for e in estimates])
    hi = np.array([e.ci95[1] for e in estimates])
    bias = float(g.mean() - gamma_true)
    return MetricBlock(
        n_converged=g.size,
        mean=float(g.mean()),
        bias=bias,
        rel_bias_pct=(100.0 * bias / gamma_true) if gamma_true != 0.0 else math.nan,
        emp_sd=float(g.std(ddof=1)),
        mean_se=float(se.mean()),
        coverage=float(((lo <= gamma_true) & (gamma_true <= hi)).mean()),
        mse=float(((g - gamma_true) ** 2).mean()),
    )


_METHOD_STREAM = {"rc": 1, "pe_rc": 2, "mi": 3}


def _replicate_rows(cfg: StudyConfig, r: int) -> list[ReplicateRow]:
    stream = RngStream(cfg.base_seed, stream_id=r)
    cohort_full, _ = generate(cfg.scenario, stream.child(0), truncate=False)
    cohort = truncate_at_event(cohort_full)
    spec = LmmSpec(fixed_basis=cfg.scenario.basis)
    rows = []
    for method in cfg.methods:
        try:
            if method == "locf":
                est = estimate_locf(cohort)
            elif method == "rc":
                est = estimate_rc(cohort, spec, post_event=False, n_boot=cfg.n_boot,
                                  stream=stream.child(_METHOD_STREAM["rc"]))
            elif method == "pe_rc":
                est = estimate_rc(cohort_full, spec, post_event=True, n_boot=cfg.n_boot,
                                  stream=stream.child(_METHOD_STREAM["pe_rc"]))
            elif method == "mi":
                est = estimate_mi(cohort, spec, m_imputations=cfg.m_imputations,
                                  stream=stream.child(_METHOD_STREAM["mi"]))
            else:
                est = estimate_jm(cohort, spec, baseline_family=cfg.baseline_family,
                                  n_quad=cfg.n_quad)
            rows.append(ReplicateRow(replicate=r, method=method, result=est))
        except (EstimationError, CoxError, LmmError, JmError) as exc:
            rows.append(ReplicateRow(replicate=r, method=method, result=None, error=str(exc)))
    return rows


def run_study(cfg: StudyConfig) -> StudyReport:
    """Run the scenario x method grid over replicates.

    Replicates run in a process pool of size ``cfg.parallelism``; failed
    fits are excluded from the metrics and show up in ``n_converged``. A
    method whose successful replicates are too few for metrics is flagged
    with ``metrics[method] = None`` and the study continues.
    """
    indices = range(cfg.n_replicates)
    if cfg.parallelism > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            per_rep = list(pool.map(_replicate_rows, [cfg] * cfg.n_replicates, indices,
                                    chunksize=max(1, cfg.n_replicates // (8 * cfg.parallelism))))
    else:
        per_rep = [_replicate_rows(cfg, r) for r in indices]
    rows = tuple(row for rep in per_rep for row in rep)
    metrics = {}
    for m in cfg.methods:
        good = [r.result for r in rows if r.method == m and r.result is not None]
        try:
            metrics[m] = compute_metrics(good, cfg.scenario.gamma_true)
        except InsufficientDataError:
            metrics[m] = None
    return StudyReport(
        label=cfg.scenario.label,
        gamma_true=cfg.scenario.gamma_true,
        methods=cfg.methods,
        n_replicates=cfg.n_replicates,
        base_seed=cfg.base_seed,
        rows=rows,
        metrics=metrics,
    )


SUMMARY_COLUMNS = ["method", "mean", "bias", "rel_bias_pct", "emp_sd", "mean_se",
                   "coverage", "mse", "n_converged"]
_REPLICATE_COLUMNS = ["replicate", "method", "gamma_hat", "se_total", "ci_lo", "ci_hi",
                      "converged", "error"]


def _summary_rows(report: StudyReport) -> list[list]:
    out = []
    for m in report.methods:
        blk = report.metrics.get(m)
        if blk is None:
            out.append([m] + ["nan"] * 7 + [0])
        else:
            out.append([
                m, repr(blk.mean), repr(blk.bias), repr(blk.rel_bias_pct), repr(blk.emp_sd),
                repr(blk.mean_se), repr(blk.coverage), repr(blk.mse), blk.n_converged,
            ])
    return out


def _write_summary_csv(report: StudyReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(_summary_rows(report))


def _write_replicates_csv(report: StudyReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REPLICATE_COLUMNS)
        for row in report.rows:
            if row.result is None:
                writer.writerow([row.replicate, row.method, "nan", "nan", "nan", "nan", 0,
                                 row.error])
            else:
                e = row.result
                writer.writerow([
                    row.replicate, row.method, repr(e.gamma_hat), repr(e.se_total),
                    repr(e.ci95[0]), repr(e.ci95[1]), 1, "",
                ])


def _report_dict(report: StudyReport) -> dict:
    summary = {}
    for m in report.methods:
        blk = report.metrics.get(m)
        summary[m] = None if blk is None else {
            "n_converged": blk.n_converged, "mean": blk.mean, "bias": blk.bias,
            "rel_bias_pct": blk.rel_bias_pct, "emp_sd": blk.emp_sd, "mean_se": blk.mean_se,
            "coverage": blk.coverage, "mse": blk.mse,
        }
    return {
        "scenario": report.label,
        "gamma_true": report.gamma_true,
        "methods": list(report.methods),
        "n_replicates": report.n_replicates,
        "base_seed": report.base_seed,
        "summary": summary,
    }


def _emit_svg(reports: Sequence[StudyReport], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(1.2 + 3.2 * n, 4.2), squeeze=False)
    for ax, rep in zip(axes.flat, reports):
        labels = [m for m in rep.methods]
        data = [[e.gamma_hat for e in rep.estimates(m)] or [math.nan] for m in labels]
        ax.boxplot(data, tick_labels=labels)
        ax.axhline(rep.gamma_true, linestyle="--", color="grey")
        lo = min((min(d) for d in data if not math.isnan(d[0])), default=0.0)
        for k, m in enumerate(labels):
            blk = rep.metrics.get(m)
            note = "failed" if blk is None else f"CR {blk.coverage:.2f}\nMSE {1000 * blk.mse:.1f}"
            ax.annotate(note, xy=(k + 1, 0.02), xycoords=("data", "axes fraction"),
                        ha="center", fontsize=7)
        ax.set_title(f"scenario {rep.label} (true {rep.gamma_true:g})", fontsize=9)
        ax.set_ylabel("estimated association")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(report: Union[StudyReport, Sequence[StudyReport]], format: str, out_dir) -> list[Path]:
    """Write the report in the requested format; returns the created paths.

    csv: per-replicate rows plus the fixed-column summary. json: metadata
    and summary. svg: one box-plot panel per scenario with the true value
    dashed and coverage / MSE x1000 printed under each method.
    """
    reports = [report] if isinstance(report, StudyReport) else list(report)
    if not reports:
        raise ValueError("empty report")
    for rep in reports:
        if not rep.methods or not rep.rows:
            raise ValueError("report has no methods/rows to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    single = len(reports) == 1
    written = []
    if format == "csv":
        for rep in reports:
            tag = "" if single else f"_{rep.label}"
            p1, p2 = out / f"replicates{tag}.csv", out / f"summary{tag}.csv"
            _write_replicates_csv(rep, p1)
            _write_summary_csv(rep, p2)
            written += [p1, p2]
    elif format == "json":
        p = out / "report.json"
        payload = _report_dict(reports[0]) if single else [_report_dict(r) for r in reports]
        p.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(p)
    elif format == "svg":
        p = out / "figure.svg"
        _emit_svg(reports, p)
        written.append(p)
    else:
        raise ValueError(f"unknown report format {format!r}")
    return written


def save_study(report: StudyReport, out_dir) -> None:
    """Persist a study so ``load_study``/the report subcommand can rebuild it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, "csv", out)
    (out / "study.json").write_text(json.dumps(_report_dict(report), indent=2) + "\n")


def load_study(in_dir) -> StudyReport:
    """Rebuild a StudyReport from a directory written by ``save_study``."""
    src = Path(in_dir)
    meta = json.loads((src / "study.json").read_text())
    rows = []
    with open(src / "replicates.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["converged"] == "1":
                g, se = float(row["gamma_hat"]), float(row["se_total"])
                est = EstimateResult(
                    method=row["method"], gamma_hat=g, se_total=se,
                    ci95=(g - Z975 * se, g + Z975 * se), converged=True, diagnostics={},
                )
                rows.append(ReplicateRow(int(row["replicate"]), row["method"], est))
            else:
                rows.append(ReplicateRow(int(row["replicate"]), row["method"], None,
                                         row["error"]))
    methods = tuple(meta["methods"])
    metrics = {}
    for m in methods:
        good = [r.result for r in rows if r.method == m and r.result is not None]
        try:
            metrics[m] = compute_metrics(good, meta["gamma_true"])
        except InsufficientDataError:
            metrics[m] = None
    return StudyReport(
        label=meta["scenario"], gamma_true=meta["gamma_true"], methods=methods,
        n_replicates=meta["n_replicates"], base_seed=meta["base_seed"],
        rows=tuple(rows), metrics=metrics,
    )


def scenario_to_json(s: ScenarioConfig) -> dict:
    return {
        "label": s.label,
        "gamma_true": s.gamma_true,
        "re_cov": np.asarray(s.re_cov).tolist(),
        "fixed_effects": np.asarray(s.fixed_effects).tolist(),
        "error_sd": s.error_sd,
        "baseline": {"family": s.baseline.family, "params": list(s.baseline.params),
                     "cuts": list(s.baseline.cuts)},
        "n_subjects": s.n_subjects,
        "trajectory": s.trajectory,
        "visit_spacing": s.visit_spacing,
        "horizon": s.horizon,
        "missing_rate": s.missing_rate,
        "seed": s.seed,
    }


def scenario_from_json(spec: Union[str, dict]) -> ScenarioConfig:
    if isinstance(spec, str):
        return preset(spec)
    d = dict(spec)
    b = d.pop("baseline")
    baseline = ParametricBaseline(b["family"], tuple(b["params"]), tuple(b.get("cuts", ())))
    return ScenarioConfig(baseline=baseline, **d)


def study_config_from_json(doc: dict) -> StudyConfig:
    d = dict(doc)
    scenario = scenario_from_json(d.pop("scenario"))
    if "methods" in d:
        d["methods"] = tuple(d["methods"])
    return StudyConfig(scenario=scenario, **d)
