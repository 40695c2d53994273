"""Mountain-car comparison with the published hyperparameters.

Runs the gradient and diagonal-Newton algorithms over several seeds and
prints the evaluation average-cost trajectory (cross-seed mean), the
desk-scale analogue of the paper-style convergence figure.

Usage: python scripts/mountaincar_table1.py [--seeds 5] [--out DIR]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sfopt.cli import parse_config, write_trace_csv
from sfopt.diagnostics import aggregate_seeds
from sfopt.environments import make_env
from sfopt.recursions import run

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--horizon", type=int, default=200_000)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    from dataclasses import replace

    for name in ("table1_gsf1_mountaincar", "table1_nsf1_diag_mountaincar"):
        config = parse_config(
            os.path.join(CONFIG_DIR, f"{name}.toml"),
            [f"run.horizon={args.horizon}"],
        )
        traces = []
        for seed in range(args.seeds):
            cfg = replace(config, seed=seed)
            trace = run(cfg, make_env(cfg.env))
            traces.append(trace)
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                write_trace_csv(os.path.join(args.out, f"{name}_seed{seed}.csv"), trace)
        ts, agg = aggregate_seeds(traces)
        mean, se = agg["avg_cost"]
        print(f"\n{config.algorithm}: evaluation average cost, mean over {args.seeds} seeds")
        for i, t in enumerate(ts):
            if t in (0, 100, 1000, 10_000, 100_000, args.horizon):
                print(f"  t = {t:>7d}   cost = {mean[i]:.4f} +- {se[i]:.4f}")


if __name__ == "__main__":
    main()
