"""Empirical rate verification on the reference chain.

Runs the Newton and gradient algorithms over several seeds, then fits
log-log decay slopes to the running minimum of the cross-seed mean squared
gradient norm and to the time-averaged Hessian tracking error. The fitted
slopes are the finite-time counterparts of the sublinear-rate guarantees
(theory predicts roughly t^-0.3 .. t^-0.4 for these exponent choices).

Usage: python scripts/chain_rates.py [--seeds 5] [--horizon 100000] [--out DIR]
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from sfopt.cli import parse_config, write_trace_csv
from sfopt.core import ExperimentConfig
from sfopt.diagnostics import loglog_slope, running_min_grad, time_avg_hessian_mse
from sfopt.environments import make_env
from sfopt.recursions import run

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def run_seeds(config: ExperimentConfig, seeds):
    from dataclasses import replace

    traces = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        traces.append(run(cfg, make_env(cfg.env)))
    return traces


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--horizon", type=int, default=100_000)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    results = {}
    for name in ("chain_nsf1", "chain_gsf1"):
        config = parse_config(
            os.path.join(CONFIG_DIR, f"{name}.toml"),
            [f"run.horizon={args.horizon}"],
        )
        traces = run_seeds(config, list(range(args.seeds)))
        ts, series = running_min_grad(traces)
        fit = loglog_slope(ts, series, 0.5)
        print(f"{name}: running-min ||grad J||^2 slope = {fit.slope:+.3f} "
              f"(r2 = {fit.r2:.3f}, window = {fit.window})")
        results[name] = {"grad_min_slope": fit.slope, "r2": fit.r2, "window": list(fit.window)}
        if config.algorithm != "gsf1":
            per_seed = [time_avg_hessian_mse(tr, tau=0) for tr in traces]
            vals = np.mean([v for _, v in per_seed], axis=0)
            t_arr = per_seed[0][0]
            i3 = int(np.searchsorted(t_arr, 1000))
            print(f"{name}: time-avg Hessian MSE  {vals[i3]:.3g} @1e3  ->  "
                  f"{vals[-1]:.3g} @{t_arr[-1]}  (ratio {vals[-1] / vals[i3]:.3f})")
            results[name]["hess_mse_ratio"] = float(vals[-1] / vals[i3])
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            for trace in traces:
                write_trace_csv(os.path.join(args.out, f"{name}_seed{trace.seed}.csv"), trace)
    if args.out:
        with open(os.path.join(args.out, "rates.json"), "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
