"""Command-line interface: simulate / fit / study / report subcommands."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data_model import TimeBasis, read_cohort, truncate_at_event, write_cohort
from .estimators import estimate_jm, estimate_locf, estimate_mi, estimate_rc
from .lmm import LmmSpec
from .numerics import RngStream
from .simulate import generate, preset, write_truth
from .study import (
    StudyConfig,
    emit_report,
    load_study,
    run_study,
    save_study,
    scenario_from_json,
    study_config_from_json,
)


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="generate a scenario cohort as CSV files")
    p.add_argument("--scenario", required=True, help="preset label, e.g. 12 or missing-7")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--keep-post-event", action="store_true",
                   help="keep exposure visits after the event (for pe_rc)")


def _add_fit(sub):
    p = sub.add_parser("fit", help="fit one method to a CSV cohort")
    p.add_argument("--method", required=True, choices=["locf", "rc", "pe_rc", "mi", "jm"])
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--basis", default="polynomial", choices=["polynomial", "ns"])
    p.add_argument("--degree", type=int, default=1, help="polynomial degree")
    p.add_argument("--knots", default=None,
                   help="comma-separated interior knots for the ns basis "
                        "(default: quantile placement with --n-knots)")
    p.add_argument("--n-knots", type=int, default=1)
    p.add_argument("--m-imputations", type=int, default=10)
    p.add_argument("--n-boot", type=int, default=500)
    p.add_argument("--n-quad", type=int, default=9)
    p.add_argument("--baseline", default="weibull",
                   choices=["weibull", "exponential", "piecewise_constant"])
    p.add_argument("--seed", type=int, default=0)


def _add_study(sub):
    p = sub.add_parser("study", help="run a Monte Carlo study")
    p.add_argument("--config", default=None, help="JSON document mirroring StudyConfig")
    p.add_argument("--scenario", default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--methods", default=None, help="comma-separated subset of "
                   "locf,rc,pe_rc,mi,jm")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--n-boot", type=int, default=None)
    p.add_argument("--m-imputations", type=int, default=None)
    p.add_argument("--n-quad", type=int, default=None)
    p.add_argument("--baseline", default=None)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--out", required=True)


def _add_report(sub):
    p = sub.add_parser("report", help="render a saved study")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--format", required=True, choices=["csv", "json", "svg"])
    p.add_argument("--out", default=None, help="output directory (default: --in)")


def _cmd_simulate(args) -> int:
    cfg = preset(args.scenario)
    if args.n_subjects is not None:
        cfg = dataclasses.replace(cfg, n_subjects=args.n_subjects)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    cohort, truth = generate(cfg, RngStream(args.seed), truncate=not args.keep_post_event)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, out / "longitudinal.csv", out / "survival.csv")
    write_truth(truth, out / "truth.csv")
    print(f"wrote {cohort.n_subjects} subjects ({cohort.n_events} events) to {out}")
    return 0


def _basis_from_args(args, cohort) -> TimeBasis:
    if args.basis == "polynomial":
        return TimeBasis.polynomial(args.degree)
    if args.knots:
        interior = [float(k) for k in args.knots.split(",")]
        times = [v.time for s in cohort.subjects for v in s.visits]
        return TimeBasis.natural_cubic_spline(interior, (min(times), max(times)))
    return TimeBasis.spline_from_cohort(cohort, n_interior=args.n_knots)


def _cmd_fit(args) -> int:
    cohort = read_cohort(args.longitudinal, args.survival, strict=False)
    basis = _basis_from_args(args, cohort)
    spec = LmmSpec(fixed_basis=basis)
    stream = RngStream(args.seed)
    if args.method == "pe_rc":
        result = estimate_rc(cohort, spec, post_event=True, n_boot=args.n_boot, stream=stream)
    else:
        truncated = truncate_at_event(cohort)
        if args.method == "locf":
            result = estimate_locf(truncated)
        elif args.method == "rc":
            result = estimate_rc(truncated, spec, n_boot=args.n_boot, stream=stream)
        elif args.method == "mi":
            result = estimate_mi(truncated, spec, m_imputations=args.m_imputations,
                                 stream=stream)
        else:
            result = estimate_jm(truncated, spec, baseline_family=args.baseline,
                                 n_quad=args.n_quad)
    print(json.dumps({
        "method": result.method,
        "gamma_hat": result.gamma_hat,
        "se_total": result.se_total,
        "ci95": list(result.ci95),
        "converged": result.converged,
        "diagnostics": result.diagnostics,
    }))
    return 0


def _cmd_study(args) -> int:
    if args.config:
        cfg = study_config_from_json(json.loads(Path(args.config).read_text()))
    else:
        if not args.scenario:
            raise SystemExit("study requires --scenario or --config")
        cfg = StudyConfig(scenario=scenario_from_json(args.scenario))
    overrides = {}
    if args.scenario and args.config:
        overrides["scenario"] = scenario_from_json(args.scenario)
    if args.replicates is not None:
        overrides["n_replicates"] = args.replicates
    if args.methods is not None:
        overrides["methods"] = tuple(args.methods.split(","))
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.jobs is not None:
        overrides["parallelism"] = args.jobs
    if args.n_boot is not None:
        overrides["n_boot"] = args.n_boot
    if args.m_imputations is not None:
        overrides["m_imputations"] = args.m_imputations
    if args.n_quad is not None:
        overrides["n_quad"] = args.n_quad
    if args.baseline is not None:
        overrides["baseline_family"] = args.baseline
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if args.n_subjects is not None:
        cfg = dataclasses.replace(
            cfg, scenario=dataclasses.replace(cfg.scenario, n_subjects=args.n_subjects)
        )
    report = run_study(cfg)
    save_study(report, args.out)
    for m in report.methods:
        blk = report.metrics.get(m)
        if blk is None:
            print(f"{m}: no metrics (all replicates failed)")
        else:
            print(f"{m}: mean={blk.mean:.4f} bias={blk.bias:+.4f} "
                  f"cover={blk.coverage:.3f} mse={blk.mse:.5f} n={blk.n_converged}")
    return 0 if report.all_methods_ok else 1


def _cmd_report(args) -> int:
    src = Path(args.in_dir)
    if (src / "study.json").exists():
        reports = [load_study(src)]
    else:
        dirs = sorted(p.parent for p in src.glob("*/study.json"))
        if not dirs:
            raise SystemExit(f"no study.json under {src}")
        reports = [load_study(d) for d in dirs]
    out = args.out or args.in_dir
    single = reports[0] if len(reports) == 1 else reports
    for path in emit_report(single, args.format, out):
        print(path)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="longcox",
        description="Association between an error-prone, intermittently measured "
                    "time-varying exposure and a right-censored event time.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_fit(sub)
    _add_study(sub)
    _add_report(sub)
    args = parser.parse_args(argv)
    handler = {
        "simulate": _cmd_simulate,
        "fit": _cmd_fit,
        "study": _cmd_study,
        "report": _cmd_report,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
