"""Command-line interface: simulate, analyze, design and diagnose."""

from __future__ import annotations

import argparse
import collections
import json
import math
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import apply_profile, expand_cells, load_preset, preset_names, read_json
from .designs import (
    DesignSpec,
    draw_case_control,
    draw_scc_balanced,
    draw_scc_neyman,
    draw_srs,
    realized_inclusion,
    resolve_cutpoints,
)
from .errors import RakesurvError, SchemaError
from .estimators import EstimationSettings, check_methods, estimate_methods
from .numeric import RngStream
from .simulation import (
    CHANNEL_SETS,
    DESIGN,
    ESTIMATION,
    Z_CRIT,
    aggregate_metrics,
    calibrate_censoring_bound,
    export_influence_pairs,
    pairs_r_squared,
    run_simulation,
    simulate_replicate,
)
from .cohort import TwoPhaseSample
from .tableio import read_cohort_csv, read_table, write_cohort_csv, write_rows

METRICS_HEADER = ("scenario", "censoring", "beta_x_true", "design", "method",
                  "pct_bias", "ese", "re", "ase", "mse", "cp", "type1", "fail_rate")
REPLICATE_HEADER = ("scenario", "censoring", "beta_x_true", "design", "replicate", "method", "ok",
                    "beta_x", "se_x", "beta_z", "se_z", "calib_residual", "error")
FAIL_TOLERANCE = 0.01
ENV_THREADS = "RAKESURV_THREADS"
ENV_OUT = "RAKESURV_OUT"


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return None if math.isnan(obj) else float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(value):
    """JSON-safe float (NaN becomes null)."""
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


def _load_config(arg):
    if os.path.exists(arg):
        return read_json(arg, "config")
    if arg in preset_names():
        return load_preset(arg)
    raise SchemaError(f"{arg}: no such config file or preset (presets: {', '.join(preset_names())})",
                      violations=[f"$: {arg}"])


def _threads(args):
    if args.threads is not None:
        return args.threads
    return int(os.environ.get(ENV_THREADS, "1"))


def _out_dir(args):
    out = args.out or os.environ.get(ENV_OUT)
    if not out:
        raise SchemaError("an output directory is required (--out or RAKESURV_OUT)", violations=["$.out"])
    Path(out).mkdir(parents=True, exist_ok=True)
    return Path(out)


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    doc = apply_profile(_load_config(args.config), args.profile, args.replicates)
    out = _out_dir(args)
    threads = _threads(args)
    start = time.perf_counter()
    metric_rows, rep_rows, cells_info = [], [], []
    for cell in expand_cells(doc):
        cfg = cell.config
        theta = calibrate_censoring_bound(cfg.beta_x, cfg.beta_z, cfg.lambda0, cfg.censoring)
        records = run_simulation(cfg, threads=threads)
        metrics = aggregate_metrics(records, cfg.beta_x, require_ht=False)
        key = (cell.scenario, cell.censoring, cfg.beta_x, cell.design_label)
        for method in cfg.methods:
            m = metrics[method]
            metric_rows.append((*key, method, *(m[k] for k in METRICS_HEADER[5:])))
        for rec in records:
            b = rec.beta if rec.ok else (math.nan, math.nan)
            s = rec.se if rec.ok else (math.nan, math.nan)
            rep_rows.append((*key, rec.replicate, rec.method, rec.ok, b[0], s[0], b[1], s[1],
                             rec.calib_residual, rec.error))
        cells_info.append(_cell_manifest(cell, theta, records, metrics))
        if args.export_replicate is not None:
            _export_replicate(cfg, args.export_replicate, out, len(cells_info) - 1)

    write_rows(out / "metrics.csv", METRICS_HEADER, metric_rows)
    write_rows(out / "replicates.csv", REPLICATE_HEADER, rep_rows)
    flags = sorted({f for c in cells_info for f in c["flags"]})
    manifest = {
        "command": "simulate",
        "config": doc,
        "profile": args.profile,
        "library_version": __version__,
        "master_seed": doc.get("seed"),
        "threads": threads,
        "cells": cells_info,
        "flags": flags,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {out / 'metrics.csv'} ({len(metric_rows)} rows) and manifest.json")
    for f in flags:
        print(f"warning: {f}", file=sys.stderr)
    return 0


def _cell_manifest(cell, theta, records, metrics):
    cfg = cell.config
    failures, warn_counts = {}, collections.Counter()
    seen = set()
    for rec in records:
        if not rec.ok:
            entry = failures.setdefault(rec.method, {"count": 0, "errors": collections.Counter()})
            entry["count"] += 1
            entry["errors"][rec.error.split(";")[0]] += 1
        if rec.replicate not in seen:
            seen.add(rec.replicate)
            warn_counts.update(rec.warnings)
    residuals = [rec.calib_residual for rec in records if rec.ok and not math.isnan(rec.calib_residual)]
    flags = []
    if cfg.replicates < 2:
        flags.append("single replicate: ESE, RE and related metrics unavailable")
    for method, m in metrics.items():
        if m["fail_rate"] > FAIL_TOLERANCE:
            flags.append(f"{method} failed in {m['fail_rate']:.1%} of replicates "
                         f"(scenario {cell.scenario}, censoring {cell.censoring}, HR {cell.hr_x}, {cell.design_label})")
    if "HT" not in metrics:
        flags.append("HT not requested: RE unavailable")
    return {
        "scenario": cell.scenario,
        "censoring": cell.censoring,
        "hr_x": cell.hr_x,
        "beta_x_true": cfg.beta_x,
        "design": cell.design,
        "replicates": cfg.replicates,
        "censoring_bound": theta,
        "failures": {k: {"count": v["count"], "errors": dict(v["errors"])} for k, v in failures.items()},
        "warnings": dict(warn_counts),
        "max_calibration_residual": max(residuals) if residuals else None,
        "flags": flags,
    }


def _export_replicate(cfg, replicate, out, cell_index):
    cohort, sample, _ = simulate_replicate(cfg, replicate)
    stem = f"cell{cell_index}_rep{replicate}"
    mapping = write_cohort_csv(out / f"{stem}.csv", cohort, sample)
    _write_json(out / f"{stem}_map.json", mapping)


# ---------------------------------------------------------------- analyze

def _stratifier(header_rows, column, cohort):
    if column is None:
        return cohort.x[:, 0]
    return np.array([float(row[column]) for row in header_rows])


def _design_sample(design_doc, cohort, r, rows):
    kind = design_doc["kind"]
    if kind in ("SCCB", "SCCN"):
        strat = _stratifier(rows, design_doc.get("stratify_on"), cohort)
        spec = DesignSpec(kind, n_target=int(r.sum()), quantiles=tuple(design_doc.get("quantiles", (0.2, 0.5, 0.8))),
                          cutpoints=tuple(design_doc["cutpoints"]) if "cutpoints" in design_doc else None)
        return realized_inclusion(kind, r, cohort.delta_star, strat, resolve_cutpoints(spec, strat))
    return realized_inclusion(kind, r, cohort.delta_star)


def cmd_analyze(args) -> int:
    mapping = read_json(args.map, "column_map")
    methods = check_methods([m.strip() for m in args.methods.split(",") if m.strip()])
    cohort, r, pi = read_cohort_csv(args.data, mapping, args.pi_column)
    _, rows = read_table(args.data)
    if pi is not None:
        sample = TwoPhaseSample(r, pi)
    else:
        design_doc = read_json(args.design, "design")
        sample = _design_sample(design_doc, cohort, r, rows)
    fcs_vars = tuple(mapping.get("fcs_vars", ("delta", "u", "x")))
    settings = EstimationSettings(args.M, args.L, fcs_vars, not args.no_intercept)
    stream = RngStream(args.seed, 0).child(ESTIMATION)
    if "True" in methods and not np.all(r == 1):
        print("note: True requires every row validated; it will be reported as failed", file=sys.stderr)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = estimate_methods(cohort, sample, methods, settings, stream)
    names = [*mapping["x"], *mapping.get("z", [])]
    scaling = mapping.get("scaling", {})
    unknown = sorted(set(scaling) - set(names))
    if unknown:
        raise SchemaError(f"scaling refers to unknown covariates {unknown}",
                          violations=[f"$.scaling.{u}" for u in unknown])
    out = _out_dir(args)
    rows_out = []
    for method, res in results.items():
        for j, name in enumerate(names):
            scale = float(scaling.get(name, 1.0))
            if res.ok:
                b, s = res.beta[j], res.se[j]
                lo, hi = math.exp(scale * (b - Z_CRIT * s)), math.exp(scale * (b + Z_CRIT * s))
                rows_out.append((method, name, b, s, scale, math.exp(scale * b), lo, hi, hi - lo, ""))
            else:
                rows_out.append((method, name, *([math.nan] * 2), scale, *([math.nan] * 4), res.error))
    header = ("method", "covariate", "beta", "se", "scale", "hr", "ci_lower", "ci_upper", "ci_width", "error")
    write_rows(out / "estimates.csv", header, rows_out)
    manifest = {
        "command": "analyze",
        "library_version": __version__,
        "data": str(args.data),
        "map": mapping,
        "methods": list(methods),
        "seed": args.seed,
        "M": args.M,
        "L": args.L,
        "n_subjects": cohort.n_subjects,
        "n_validated": sample.n_validated,
        "pi_source": args.pi_column if pi is not None else "design",
        "failures": {m: r_.error for m, r_ in results.items() if not r_.ok},
        "calibration_residuals": {m: _clean(r_.calib_residual) for m, r_ in results.items() if r_.ok},
        "g_ranges": {m: list(r_.g_range) for m, r_ in results.items() if r_.ok and r_.g_range},
        "warnings": sorted({f"{w.category.__name__}: {w.message}" for w in caught}),
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {out / 'estimates.csv'}")
    return 0


# ---------------------------------------------------------------- design

def cmd_design(args) -> int:
    spec = read_json(args.spec, "design")
    header, rows = read_table(args.data)
    id_col = spec.get("id", "id")
    d_col = spec.get("delta_star", "delta_star")
    kind = spec["kind"]
    needed = [d_col]
    if kind in ("SCCB", "SCCN"):
        if "stratify_on" not in spec:
            raise SchemaError("stratified designs need 'stratify_on'", violations=["$.stratify_on"])
        needed.append(spec["stratify_on"])
    if kind == "SCCN":
        if "influence" not in spec:
            raise SchemaError("Neyman allocation needs an 'influence' column", violations=["$.influence"])
        needed.append(spec["influence"])
    if kind != "CC" and "n" not in spec:
        raise SchemaError(f"{kind} design needs 'n'", violations=["$.n"])
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{args.data}: missing columns {missing}", violations=[f"$.columns: {c}" for c in missing])
    delta_star = np.array([float(row[d_col]) for row in rows])
    ids = [row[id_col] for row in rows] if id_col in header else [str(i + 1) for i in range(len(rows))]
    gen = RngStream(args.seed, 0).child(DESIGN)
    n = spec.get("n")
    if kind == "SRS":
        sample = draw_srs(len(rows), n, gen)
    elif kind == "CC":
        sample = draw_case_control(delta_star, n, gen, spec.get("cc_ratio", 1.0))
    else:
        strat = np.array([float(row[spec["stratify_on"]]) for row in rows])
        ds = DesignSpec(kind, n_target=n, quantiles=tuple(spec.get("quantiles", (0.2, 0.5, 0.8))),
                        cutpoints=tuple(spec["cutpoints"]) if "cutpoints" in spec else None)
        cuts = resolve_cutpoints(ds, strat)
        if kind == "SCCB":
            sample = draw_scc_balanced(delta_star, strat, cuts, n, gen)
        else:
            infl = np.array([float(row[spec["influence"]]) for row in rows])
            sample = draw_scc_neyman(delta_star, strat, cuts, infl, n, gen)
    desc = sample.design
    labels = desc.stratum_labels or ("all",)
    strata = desc.strata if desc.strata is not None else np.zeros(len(rows), dtype=int)
    write_rows(args.out, ("id", "r", "pi", "stratum"),
               ((ids[i], int(sample.r[i]), sample.pi[i], labels[strata[i]]) for i in range(len(rows))))
    summary = {
        "command": "design",
        "library_version": __version__,
        "spec": spec,
        "seed": args.seed,
        "n_subjects": len(rows),
        "n_validated": sample.n_validated,
        "strata": [
            {"label": lab, "size": int(size), "sampled": int(k)}
            for lab, size, k in zip(desc.stratum_labels, desc.stratum_sizes, desc.stratum_sampled)
        ],
        "warnings": list(desc.warnings),
    }
    _write_json(f"{args.out}.manifest.json", summary)
    for s in summary["strata"]:
        print(f"{s['label']:>10}  size {s['size']:>7}  sampled {s['sampled']:>6}")
    for w in desc.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- diagnose

def cmd_diagnose(args) -> int:
    doc = _load_config(args.config)
    cell = expand_cells(doc)[0]
    cfg = cell.config
    channels = (("none", ()),) if args.no_error else CHANNEL_SETS
    rows = export_influence_pairs(cfg, RngStream(cfg.seed, 0), channels)
    write_rows(args.out, ("channel", "subject", "coefficient", "true", "error_prone"), rows)
    r2 = {name: pairs_r_squared(rows, name, 0) for name, _ in channels}
    _write_json(f"{args.out}.manifest.json", {
        "command": "diagnose",
        "library_version": __version__,
        "config": doc,
        "cell": {"scenario": cell.scenario, "censoring": cell.censoring, "hr_x": cell.hr_x},
        "seed": cfg.seed,
        "r_squared_beta_x": r2,
    })
    for name, v in r2.items():
        print(f"{name:>11}  R^2 {v:.4f}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rakesurv", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rakesurv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a simulation config and write metrics")
    p.add_argument("--config", required=True, help="config JSON file or preset name")
    p.add_argument("--out", help=f"output directory (or ${ENV_OUT})")
    p.add_argument("--threads", type=int, help=f"worker processes (or ${ENV_THREADS}; default 1)")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--replicates", type=int, help="override the replicate count")
    p.add_argument("--export-replicate", type=int, metavar="K",
                   help="also write replicate K of every cell as an analysis-ready CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="estimate hazard ratios from a two-phase data file")
    p.add_argument("--data", required=True)
    p.add_argument("--map", required=True, help="column mapping JSON")
    p.add_argument("--methods", required=True, help="comma-separated method names")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pi-column", help="column holding inclusion probabilities")
    src.add_argument("--design", help="design JSON from which probabilities are derived")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--M", type=int, default=10)
    p.add_argument("--L", type=int, default=50)
    p.add_argument("--no-intercept", action="store_true", help="do not calibrate the weight total")
    p.add_argument("--out", help=f"output directory (or ${ENV_OUT})")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("design", help="draw a phase-two validation sample")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="design JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="sample CSV")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("diagnose", help="export true versus error-prone influence pairs")
    p.add_argument("--config", required=True, help="config JSON file or preset name")
    p.add_argument("--out", required=True, help="pairs CSV")
    p.add_argument("--no-error", action="store_true", help="single block with error-free data")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RakesurvError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
