"""Finite-time metrics and rate verification.

Traces hold per-iteration metric rows on a recording grid; this module
turns them into the quantities the rate theory talks about: the running
time-average of the Hessian tracking error, the running minimum of the
cross-seed mean squared gradient norm, and fitted log-log decay slopes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

METRICS = ("grad_norm_sq", "hess_err_sq", "z_err_sq", "avg_cost", "J_exact")


class GridMismatch(ValueError):
    """Traces were recorded on different iteration grids."""


class MissingMetric(ValueError):
    """A required metric is absent from the trace."""


class NonPositiveValue(ValueError):
    """Log-log fitting needs strictly positive values."""


@dataclass
class MetricRow:
    t: int
    grad_norm_sq: Optional[float] = None
    hess_err_sq: Optional[float] = None
    z_err_sq: Optional[float] = None
    avg_cost: Optional[float] = None
    J_exact: Optional[float] = None


@dataclass
class RunTrace:
    config_hash: str
    seed: int
    rows: List[MetricRow] = field(default_factory=list)
    status: str = "ok"

    def ts(self) -> np.ndarray:
        return np.array([r.t for r in self.rows], dtype=int)

    def column(self, metric: str) -> np.ndarray:
        """Metric values as an array with None mapped to nan."""
        if metric not in METRICS:
            raise KeyError(metric)
        vals = [getattr(r, metric) for r in self.rows]
        return np.array([math.nan if v is None else v for v in vals], dtype=float)


def record_grid(horizon: int, mode: str = "geometric", eval_every: int = 1000) -> list:
    """Iteration indices at which metrics are recorded.

    Geometric mode uses rounded powers of 1.15 so log-log fits weight
    decades evenly, plus exact rows at 0, every power of ten, and the
    horizon. Linear mode records every eval_every iterations.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    ts = {0, horizon}
    if mode == "linear":
        ts.update(range(0, horizon + 1, eval_every))
    elif mode == "geometric":
        k = 0
        while True:
            t = round(1.15**k)
            if t > horizon:
                break
            ts.add(t)
            k += 1
        decade = 10
        while decade <= horizon:
            ts.add(decade)
            decade *= 10
    else:
        raise ValueError(f"unknown recording mode {mode!r}")
    return sorted(ts)


def time_avg_hessian_mse(trace: RunTrace, tau: int = 0):
    """Running time-average of the Hessian tracking error from burn-in tau.

    Recorded rows are step-weighted by the gap they close, so a stride-1
    trace reproduces the exact running mean and coarser grids approximate
    it without stride bias: at row t_j the value v_j stands in for
    iterations (t_{j-1}, t_j]. Returns (ts, averages).
    """
    rows = [r for r in trace.rows if r.t >= tau]
    if not rows:
        raise ValueError(f"no recorded rows at or after tau={tau}")
    for r in rows:
        if r.hess_err_sq is None:
            raise MissingMetric(f"hess_err_sq missing at t={r.t}")
    ts = np.array([r.t for r in rows], dtype=int)
    vals = np.array([r.hess_err_sq for r in rows], dtype=float)
    gaps = np.diff(ts, prepend=tau - 1).astype(float)
    cum = np.cumsum(gaps * vals)
    return ts, cum / (ts - tau + 1)


def _common_grid(traces: Sequence[RunTrace]) -> np.ndarray:
    grids = [trace.ts() for trace in traces]
    for g in grids[1:]:
        if len(g) != len(grids[0]) or np.any(g != grids[0]):
            raise GridMismatch("traces were recorded on different grids")
    return grids[0]


def running_min_grad(traces: Sequence[RunTrace]):
    """Running minimum of the cross-seed mean squared gradient norm.

    Returns (ts, series); the series is nonincreasing by construction.
    """
    ts = _common_grid(traces)
    cols = []
    for trace in traces:
        col = trace.column("grad_norm_sq")
        if np.any(np.isnan(col)):
            raise MissingMetric(f"grad_norm_sq missing in trace seed={trace.seed}")
        cols.append(col)
    mean = np.mean(cols, axis=0)
    return ts, np.minimum.accumulate(mean)


def aggregate_seeds(traces: Sequence[RunTrace]):
    """Pointwise cross-seed mean and standard error for every metric.

    Returns (ts, {metric: (mean, se)}); metrics absent from all traces map
    to all-nan columns. Needs at least two traces.
    """
    if len(traces) < 2:
        raise ValueError("aggregation needs at least 2 traces")
    ts = _common_grid(traces)
    out = {}
    for metric in METRICS:
        mat = np.stack([trace.column(metric) for trace in traces])
        count = np.sum(~np.isnan(mat), axis=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=RuntimeWarning)
            mean = np.nanmean(mat, axis=0)
            sd = np.nanstd(mat, axis=0, ddof=1)
        se = sd / np.sqrt(np.maximum(count, 1))
        out[metric] = (mean, se)
    return ts, out


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    window: tuple
    n_points: int


def loglog_slope(ts, values, window_frac: float = 0.5) -> RateFit:
    """Least-squares slope of log(value) against log(t) on a tail window.

    The window is the trailing window_frac fraction of the recorded points
    with t >= 1 (t = 0 cannot be placed on a log axis). Values inside the
    window must be strictly positive.
    """
    if not (0.0 < window_frac <= 1.0):
        raise ValueError(f"window_frac must lie in (0, 1], got {window_frac}")
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = ts >= 1.0
    ts, values = ts[keep], values[keep]
    n = len(ts)
    k = max(int(math.ceil(window_frac * n)), 10)
    if n < k or n < 10:
        raise ValueError(f"need at least 10 points in the fit window, have {n}")
    ts, values = ts[n - k :], values[n - k :]
    if np.any(values <= 0.0) or np.any(~np.isfinite(values)):
        raise NonPositiveValue("series must be positive and finite on the fit window")
    x = np.log(ts)
    y = np.log(values)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return RateFit(
        slope=float(slope),
        intercept=float(intercept),
        r2=r2,
        window=(int(ts[0]), int(ts[-1])),
        n_points=k,
    )
