"""Experiment runner CLI: run | sweep | slope | compare.

Configs are TOML files with [run], [schedule] and [env] sections; any key
can be overridden on the command line with --set section.key=value. Each
run emits one CSV per seed plus a cross-seed aggregate CSV and a JSON
summary of fitted decay slopes. Exit codes: 0 success, 1 validation
error, 2 runtime failure, 3 partial (some seeds failed).
"""

from __future__ import annotations

import argparse
import glob as globlib
import itertools
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .core import (
    ALGORITHMS,
    EnvSpec,
    ExperimentConfig,
    OrderingViolation,
    StepSchedule,
    ValidationError,
)
from .diagnostics import (
    METRICS,
    GridMismatch,
    MetricRow,
    MissingMetric,
    RunTrace,
    aggregate_seeds,
    loglog_slope,
    running_min_grad,
    time_avg_hessian_mse,
)
from .environments import make_env
from .recursions import run

logger = logging.getLogger("sfopt")

CSV_HEADER = "t,seed,grad_norm_sq,hess_err_sq,z_err_sq,avg_cost,J_exact"


class ParseError(ValueError):
    """Config file could not be parsed."""


class EnvMismatch(ValueError):
    """compare requires both configs to target the same environment."""


class EmptyGrid(ValueError):
    """No valid cells remain in a sweep grid."""


# ---------------------------------------------------------------------------
# Config parsing

_RUN_KEYS = {
    "algorithm": str,
    "beta": float,
    "horizon": int,
    "burn_in": int,
    "seed": int,
    "eval_every": int,
    "record_grid": str,
    "box_lower": None,  # scalar or list
    "box_upper": None,
    "pd_floor": float,
    "theta0": None,
    "theta0_jitter": float,
}
_SCHEDULE_KEYS = {"sigma": float, "alpha": float, "nu": float, "a0": float, "b0": float, "c0": float}
_ENV_KEYS = {
    "kind": str,
    "n_states": int,
    "dim": int,
    "gen_seed": int,
    "logit_scale": float,
    "cost_offset_scale": float,
    "mu_scale": float,
    "hidden": int,
    "noise_std": float,
    "eval_rollout": int,
    "eval_warmup": int,
}
_SECTIONS = {"run": _RUN_KEYS, "schedule": _SCHEDULE_KEYS, "env": _ENV_KEYS}


def _check_keys(section: str, data: dict) -> None:
    known = _SECTIONS[section]
    for key in data:
        if key not in known:
            raise ParseError(f"unknown key [{section}] {key!r}")


def _require(section: dict, name: str, key: str):
    if key not in section:
        raise ValidationError(f"missing required key [{name}] {key!r}")
    return section[key]


def _as_box(value) -> tuple:
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(v) for v in value)


def parse_set_overrides(pairs: Sequence[str]) -> dict:
    """Parse --set section.key=value pairs; values use TOML literal syntax."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ParseError(f"--set expects section.key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        if "." not in key:
            raise ParseError(f"--set key must be qualified as section.key, got {key!r}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ParseError(f"--set section must be one of {sorted(_SECTIONS)}, got {section!r}")
        if name not in _SECTIONS[section]:
            raise ParseError(f"--set references unknown key [{section}] {name!r}")
        try:
            value = tomllib.loads(f"x = {raw}")["x"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare strings are allowed unquoted
        out.setdefault(section, {})[name] = value
    return out


def build_config(doc: dict) -> ExperimentConfig:
    """Assemble and validate an ExperimentConfig from parsed TOML sections."""
    for section in doc:
        if section not in _SECTIONS:
            raise ParseError(f"unknown section [{section}]")
    run_sec = doc.get("run", {})
    sched_sec = doc.get("schedule", {})
    env_sec = doc.get("env", {})
    _check_keys("run", run_sec)
    _check_keys("schedule", sched_sec)
    _check_keys("env", env_sec)

    algorithm = _require(run_sec, "run", "algorithm")
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    schedule = StepSchedule(
        sigma=float(_require(sched_sec, "schedule", "sigma")),
        alpha=float(_require(sched_sec, "schedule", "alpha")),
        nu=(float(sched_sec["nu"]) if "nu" in sched_sec else None),
        a0=float(sched_sec.get("a0", 1.0)),
        b0=float(sched_sec.get("b0", 1.0)),
        c0=float(sched_sec.get("c0", 1.0)),
    )
    kind = _require(env_sec, "env", "kind")
    env_kwargs = {k: v for k, v in env_sec.items() if k != "kind"}
    env = EnvSpec(kind=kind, **env_kwargs)

    theta0 = run_sec.get("theta0")
    config = ExperimentConfig(
        algorithm=algorithm,
        beta=float(_require(run_sec, "run", "beta")),
        schedule=schedule,
        horizon=int(_require(run_sec, "run", "horizon")),
        env=env,
        box_lower=_as_box(run_sec.get("box_lower", -1.0)),
        box_upper=_as_box(run_sec.get("box_upper", 1.0)),
        burn_in=int(run_sec.get("burn_in", 0)),
        pd_floor=float(run_sec.get("pd_floor", 1e-3)),
        seed=int(run_sec.get("seed", 0)),
        eval_every=int(run_sec.get("eval_every", 1000)),
        record_grid=str(run_sec.get("record_grid", "geometric")),
        theta0=(None if theta0 is None else tuple(float(v) for v in theta0)),
        theta0_jitter=float(run_sec.get("theta0_jitter", 0.0)),
    )
    return config.validate()


def parse_config(path: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load, override and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for section, values in parse_set_overrides(overrides).items():
        doc.setdefault(section, {}).update(values)
    return build_config(doc)


# ---------------------------------------------------------------------------
# CSV / JSON emission


def _fmt(value) -> str:
    return "" if value is None else f"{value:.17g}"


def write_trace_csv(path: str, trace: RunTrace) -> None:
    lines = [CSV_HEADER]
    for r in trace.rows:
        lines.append(
            ",".join(
                [str(r.t), str(trace.seed)]
                + [_fmt(getattr(r, m)) for m in METRICS]
            )
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace_csv(path: str) -> RunTrace:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ParseError(f"{path}: unexpected CSV header")
    rows = []
    seed = 0
    for ln in lines[1:]:
        fields = ln.split(",")
        seed = int(fields[1])
        vals = [None if f == "" else float(f) for f in fields[2:]]
        rows.append(MetricRow(int(fields[0]), *vals))
    return RunTrace(config_hash="", seed=seed, rows=rows)


def write_aggregate_csv(path: str, traces: Sequence[RunTrace]) -> None:
    ts, agg = aggregate_seeds(traces)
    header = ["t", "n_seeds"]
    for metric in METRICS:
        header += [f"{metric}_mean", f"{metric}_se"]
    lines = [",".join(header)]
    n = len(traces)
    for i, t in enumerate(ts):
        fields = [str(int(t)), str(n)]
        for metric in METRICS:
            mean, se = agg[metric]
            fields.append("" if np.isnan(mean[i]) else f"{mean[i]:.17g}")
            fields.append("" if np.isnan(se[i]) else f"{se[i]:.17g}")
        lines.append(",".join(fields))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _fit_or_reason(ts, values, window_frac: float):
    try:
        fit = loglog_slope(ts, values, window_frac)
    except (ValueError, FloatingPointError) as exc:
        return {"skipped": str(exc)}
    return {
        "slope": fit.slope,
        "r2": fit.r2,
        "window": list(fit.window),
        "n_points": fit.n_points,
    }


def slope_summary(traces: Sequence[RunTrace], window_frac: float = 0.5) -> list:
    """Per-metric slope fits: running-min gradient, time-averaged Hessian
    MSE, and the plain cross-seed mean of the remaining metrics."""
    summary = []
    n_seeds = len(traces)

    def add(metric, ts, values):
        entry = {"metric": metric, "n_seeds": n_seeds}
        entry.update(_fit_or_reason(ts, values, window_frac))
        summary.append(entry)

    try:
        ts, series = running_min_grad(traces)
        add("grad_min", ts, series)
    except (MissingMetric, GridMismatch) as exc:
        summary.append({"metric": "grad_min", "n_seeds": n_seeds, "skipped": str(exc)})
    try:
        per_seed = [time_avg_hessian_mse(trace, tau=0) for trace in traces]
        ts = per_seed[0][0]
        vals = np.mean([v for _, v in per_seed], axis=0)
        add("hess_mse_avg", ts, vals)
    except (MissingMetric, ValueError) as exc:
        summary.append({"metric": "hess_mse_avg", "n_seeds": n_seeds, "skipped": str(exc)})
    for metric in ("z_err_sq", "avg_cost"):
        cols = np.stack([trace.column(metric) for trace in traces])
        if np.all(np.isnan(cols)):
            summary.append({"metric": metric, "n_seeds": n_seeds, "skipped": "metric not recorded"})
            continue
        add(metric, traces[0].ts(), np.nanmean(cols, axis=0))
    return summary


# ---------------------------------------------------------------------------
# Subcommands


def _parse_seeds(spec: Optional[str], base_seed: int, default_count: int = 1) -> list:
    if spec is None:
        return [base_seed + i for i in range(default_count)]
    if "," in spec:
        return [int(s) for s in spec.split(",") if s.strip()]
    return [base_seed + i for i in range(int(spec))]


def cmd_run(
    config: ExperimentConfig,
    seeds: Sequence[int],
    out_dir: str,
    checkpoint_every: int = 0,
    resume_from: Optional[str] = None,
) -> int:
    if resume_from is not None and len(seeds) != 1:
        raise ValidationError("--resume applies to a single-seed run")
    os.makedirs(out_dir, exist_ok=True)
    traces, failures = [], []
    for seed in seeds:
        cfg = replace(config, seed=seed).validate()
        env = make_env(cfg.env)
        ckpt_dir = os.path.join(out_dir, f"ckpt_seed{seed}") if checkpoint_every > 0 else None
        try:
            trace = run(
                cfg,
                env,
                checkpoint_every=checkpoint_every,
                checkpoint_dir=ckpt_dir,
                resume_from=resume_from,
            )
        except Exception as exc:  # noqa: BLE001 - isolate per-seed failures
            logger.error("seed %d failed before producing a trace: %s", seed, exc)
            failures.append((seed, str(exc)))
            continue
        write_trace_csv(os.path.join(out_dir, f"seed_{seed}.csv"), trace)
        if trace.status != "ok":
            logger.error("seed %d: %s", seed, trace.status)
            failures.append((seed, trace.status))
        else:
            traces.append(trace)
    if len(traces) >= 2:
        write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"), traces)
    summary = {
        "seeds": list(seeds),
        "n_ok": len(traces),
        "failures": [{"seed": s, "error": e} for s, e in failures],
        "slopes": slope_summary(traces) if traces else [],
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    if failures and traces:
        return 3
    if failures:
        return 2
    return 0


def _grid_cells(grid_specs: Sequence[str]) -> list:
    axes = {}
    for spec in grid_specs:
        if "=" not in spec:
            raise ParseError(f"--grid expects name=v1,v2,..., got {spec!r}")
        name, raw = spec.split("=", 1)
        if name not in ("sigma", "alpha", "nu"):
            raise ParseError(f"--grid axis must be sigma, alpha or nu, got {name!r}")
        axes[name] = [float(v) for v in raw.split(",") if v.strip()]
    if not axes:
        return []
    names = sorted(axes)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
    return cells


def cmd_sweep(
    config: ExperimentConfig,
    grid_specs: Sequence[str],
    seeds_per_cell: int,
    out_dir: str,
) -> int:
    cells = _grid_cells(grid_specs)
    if not cells:
        raise EmptyGrid("sweep grid is empty")
    os.makedirs(out_dir, exist_ok=True)
    results = []
    any_valid = False
    for index, cell in enumerate(cells):
        schedule = replace(config.schedule, **cell)
        try:
            cfg = replace(config, schedule=schedule).validate()
        except (OrderingViolation, ValidationError) as exc:
            logger.warning("skipping cell %s: %s", cell, exc)
            results.append({"cell": cell, "skipped": str(exc)})
            continue
        any_valid = True
        # Documented seed scheme: cell i uses base seed + 10000 * i.
        base = config.seed + 10_000 * index
        cell_seeds = [base + j for j in range(seeds_per_cell)]
        cell_dir = os.path.join(out_dir, f"cell_{index:03d}")
        code = cmd_run(cfg, cell_seeds, cell_dir)
        entry = {"cell": cell, "dir": cell_dir, "exit": code}
        if code in (0, 3):
            with open(os.path.join(cell_dir, "summary.json")) as fh:
                slopes = json.load(fh)["slopes"]
            for item in slopes:
                if item["metric"] in ("grad_min", "avg_cost") and "slope" in item:
                    entry["target_metric"] = item["metric"]
                    entry["slope"] = item["slope"]
                    break
        results.append(entry)
    if not any_valid:
        raise EmptyGrid("no valid cells in sweep grid")
    fitted = [r for r in results if "slope" in r]
    best = min(fitted, key=lambda r: r["slope"]) if fitted else None
    payload = {"cells": results, "best": best}
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    lines = ["sigma,alpha,nu,slope,best"]
    for r in results:
        cell = r["cell"]
        lines.append(
            ",".join(
                [
                    _fmt(cell.get("sigma")),
                    _fmt(cell.get("alpha")),
                    _fmt(cell.get("nu")),
                    _fmt(r.get("slope")),
                    "1" if best is not None and r is best else "0",
                ]
            )
        )
    with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_slope(trace_paths: Sequence[str], metric: str, window_frac: float, out_path: Optional[str]) -> int:
    paths = []
    for pattern in trace_paths:
        matched = sorted(globlib.glob(pattern))
        paths.extend(matched if matched else [pattern])
    traces = [read_trace_csv(p) for p in paths]
    if not traces:
        raise ValidationError("no trace CSVs given")
    summary = slope_summary(traces, window_frac)
    wanted = [s for s in summary if s["metric"] == metric]
    if not wanted:
        raise ValidationError("metric must be one of grad_min, hess_mse_avg, z_err_sq, avg_cost")
    payload = wanted[0]
    text = json.dumps(payload, indent=2)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if "slope" in payload else 2


def cmd_compare(
    config_a: ExperimentConfig,
    config_b: ExperimentConfig,
    seeds: Sequence[int],
    out_dir: str,
) -> int:
    if config_a.env != config_b.env:
        raise EnvMismatch("compare requires identical [env] sections")
    os.makedirs(out_dir, exist_ok=True)
    codes = {}
    finals = {}
    for label, cfg in (("a", config_a), ("b", config_b)):
        sub = os.path.join(out_dir, label)
        codes[label] = cmd_run(cfg, seeds, sub)
        with open(os.path.join(sub, "summary.json")) as fh:
            summary = json.load(fh)
        traces = [
            read_trace_csv(os.path.join(sub, f"seed_{s}.csv"))
            for s in seeds
            if os.path.exists(os.path.join(sub, f"seed_{s}.csv"))
        ]
        final_row = {}
        if traces:
            ts, agg = aggregate_seeds(traces) if len(traces) > 1 else (traces[0].ts(), None)
            for metric in METRICS:
                if agg is not None:
                    val = agg[metric][0][-1]
                else:
                    val = traces[0].column(metric)[-1]
                final_row[metric] = None if np.isnan(val) else float(val)
        finals[label] = {"exit": codes[label], "final": final_row, "slopes": summary["slopes"]}
    with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
        json.dump(finals, fh, indent=2)
    lines = ["metric,final_a,final_b"]
    for metric in METRICS:
        lines.append(
            ",".join(
                [
                    metric,
                    _fmt(finals["a"]["final"].get(metric)),
                    _fmt(finals["b"]["final"].get(metric)),
                ]
            )
        )
    with open(os.path.join(out_dir, "comparison.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return max(codes.values())


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", default=None, help="seed count or comma list")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config key")

    p_run = sub.add_parser("run", help="run one config over seeds")
    add_common(p_run)
    p_run.add_argument("--checkpoint-every", type=int, default=0)
    p_run.add_argument("--resume", default=None, help="checkpoint file to resume from")

    p_sweep = sub.add_parser("sweep", help="grid sweep over step-size exponents")
    add_common(p_sweep)
    p_sweep.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2,...")

    p_slope = sub.add_parser("slope", help="fit a decay slope to trace CSVs")
    p_slope.add_argument("traces", nargs="+", help="trace CSV paths or globs")
    p_slope.add_argument("--metric", default="grad_min",
                         choices=["grad_min", "hess_mse_avg", "z_err_sq", "avg_cost"])
    p_slope.add_argument("--window-frac", type=float, default=0.5)
    p_slope.add_argument("--out", default=None)

    p_cmp = sub.add_parser("compare", help="paired comparison of two configs")
    p_cmp.add_argument("--config-a", required=True)
    p_cmp.add_argument("--config-b", required=True)
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--seeds", default=None)
    p_cmp.add_argument("--set", dest="overrides", action="append", default=[])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SFOPT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config, args.overrides)
            seeds = _parse_seeds(args.seeds, config.seed)
            return cmd_run(
                config, seeds, args.out,
                checkpoint_every=args.checkpoint_every,
                resume_from=args.resume,
            )
        if args.command == "sweep":
            config = parse_config(args.config, args.overrides)
            seeds = _parse_seeds(args.seeds, config.seed)
            return cmd_sweep(config, args.grid, len(seeds), args.out)
        if args.command == "slope":
            return cmd_slope(args.traces, args.metric, args.window_frac, args.out)
        if args.command == "compare":
            config_a = parse_config(args.config_a, args.overrides)
            config_b = parse_config(args.config_b, args.overrides)
            seeds = _parse_seeds(args.seeds, config_a.seed)
            return cmd_compare(config_a, config_b, seeds, args.out)
        parser.error(f"unknown command {args.command}")
    except (ParseError, ValidationError, OrderingViolation, EnvMismatch, EmptyGrid) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failure
        logger.error("runtime failure: %s", exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
