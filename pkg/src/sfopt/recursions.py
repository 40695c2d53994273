"""The coupled stochastic recursions and run loops.

One iteration of the three-timescale Newton scheme, in the order the
algorithm prescribes:

    1. draw eta ~ N(0, I) and simulate one cost at theta + beta*eta
    2. Hessian tracking      H <- H + b(t) (Hhat - H)      (fastest)
    3. PD projection         Hpd = clip_eigenvalues(H, eps)
    4. gradient tracking     Z <- Z + c(t) (ghat - Z)      (intermediate)
    5. parameter update      theta <- clamp(theta - a(t) Hpd^-1 Z)  (slowest)

The projected matrix feeds the Newton direction only; the tracked H stays
the raw convex combination, which is the object the tracking-error
diagnostics measure. The two-timescale gradient scheme drops steps 2-3 and
descends along Z itself.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import chain_oracle
from .core import (
    EVAL_STREAM,
    ExperimentConfig,
    RunRngs,
    THETA_INIT_STREAM,
    config_hash,
    sample_perturbation,
    standard_normals,
    step_size,
    substream,
)
from .diagnostics import MetricRow, RunTrace, record_grid
from .estimators import sf_gradient_sample, sf_hessian_sample


class SolveFailure(RuntimeError):
    """Newton linear solve missed the residual tolerance."""


class NonFiniteMatrix(ValueError):
    """Matrix handed to the PD projection contains nan or inf."""


class CorruptCheckpoint(RuntimeError):
    """Checkpoint does not match the current configuration."""


@dataclass
class OptimizerState:
    theta: np.ndarray
    H: Optional[np.ndarray]  # None for the gradient-only algorithm
    Z: np.ndarray
    t: int


def hessian_track_step(
    H: np.ndarray, h_hat: np.ndarray, b: float, diag_only: bool = False
) -> np.ndarray:
    """Convex combination (1-b) H + b Hhat; Jacobi mode zeroes off-diagonals."""
    if not (0.0 < b <= 1.0):
        raise ValueError(f"b must lie in (0, 1], got {b}")
    out = (1.0 - b) * H + b * h_hat
    if diag_only:
        out = np.diag(np.diag(out).copy())
    return out


def gradient_track_step(Z: np.ndarray, g_hat: np.ndarray, c: float) -> np.ndarray:
    """Convex combination (1-c) Z + c ghat."""
    if not (0.0 < c <= 1.0):
        raise ValueError(f"c must lie in (0, 1], got {c}")
    return (1.0 - c) * Z + c * g_hat


def project_pd(H: np.ndarray, eps: float) -> np.ndarray:
    """Eigenvalue clipping onto matrices with smallest eigenvalue >= eps.

    Already-compliant matrices are returned unchanged (so the projection is
    exactly idempotent there); otherwise the symmetric eigendecomposition
    is clipped and recomposed.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not np.all(np.isfinite(H)):
        raise NonFiniteMatrix("PD projection input contains non-finite entries")
    w, Q = np.linalg.eigh(H)
    if w[0] >= eps:
        return H
    out = (Q * np.maximum(w, eps)) @ Q.T
    return 0.5 * (out + out.T)


def newton_direction(Hpd: np.ndarray, Z: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Solve Hpd d = Z; never forms the explicit inverse."""
    try:
        d = np.linalg.solve(Hpd, Z)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"linear solve failed: {exc}") from exc
    denom = max(float(np.linalg.norm(Z)), 1e-300)
    residual = float(np.linalg.norm(Hpd @ d - Z)) / denom
    if residual > rtol:
        raise SolveFailure(f"relative residual {residual:.3e} exceeds {rtol:.1e}")
    return d


def project_box(x: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Componentwise clamp onto [lower, upper]."""
    return np.clip(x, lower, upper)


def _steps(config: ExperimentConfig, t: int):
    sched = config.schedule
    a = step_size(sched, "a", t)
    c = step_size(sched, "c", t)
    b = step_size(sched, "b", t) if config.algorithm != "gsf1" else None
    return a, b, c


def nsf1_step(
    state: OptimizerState,
    env,
    config: ExperimentConfig,
    rngs: RunRngs,
    _box=None,
) -> OptimizerState:
    """One full three-timescale Newton iteration."""
    a, b, c = _steps(config, state.t)
    eta = sample_perturbation(rngs.perturbation, env.dim())
    cost = env.step(state.theta + config.beta * eta, rngs.environment)
    diag_only = config.algorithm == "nsf1_diag"
    H1 = hessian_track_step(
        state.H, sf_hessian_sample(eta, config.beta, cost), b, diag_only
    )
    Z1 = gradient_track_step(state.Z, sf_gradient_sample(eta, config.beta, cost), c)
    if diag_only:
        # Eigenvalues of a diagonal matrix are its entries, so the PD
        # projection and the solve reduce to componentwise operations.
        direction = Z1 / np.maximum(np.diag(H1), config.pd_floor)
    else:
        direction = newton_direction(project_pd(H1, config.pd_floor), Z1)
    lower, upper = _box if _box is not None else config.box()
    theta1 = project_box(state.theta - a * direction, lower, upper)
    return OptimizerState(theta=theta1, H=H1, Z=Z1, t=state.t + 1)


def gsf1_step(
    state: OptimizerState,
    env,
    config: ExperimentConfig,
    rngs: RunRngs,
    _box=None,
) -> OptimizerState:
    """One two-timescale gradient iteration."""
    a, _, c = _steps(config, state.t)
    eta = sample_perturbation(rngs.perturbation, env.dim())
    cost = env.step(state.theta + config.beta * eta, rngs.environment)
    Z1 = gradient_track_step(state.Z, sf_gradient_sample(eta, config.beta, cost), c)
    lower, upper = _box if _box is not None else config.box()
    theta1 = project_box(state.theta - a * Z1, lower, upper)
    return OptimizerState(theta=theta1, H=None, Z=Z1, t=state.t + 1)


def initial_state(config: ExperimentConfig, env) -> OptimizerState:
    """theta0 (explicit, or box midpoint, optionally jittered), H = I, Z = 0."""
    d = env.dim()
    lower, upper = config.box()
    if config.theta0 is not None:
        theta = np.asarray(config.theta0, dtype=float).copy()
    else:
        theta = 0.5 * (lower + upper)
    if config.theta0_jitter > 0.0:
        jitter = config.theta0_jitter * standard_normals(
            substream(config.seed, THETA_INIT_STREAM), d
        )
        theta = project_box(theta + jitter, lower, upper)
    H = None if config.algorithm == "gsf1" else np.eye(d)
    return OptimizerState(theta=theta, H=H, Z=np.zeros(d), t=0)


# ---------------------------------------------------------------------------
# Metric recording


def _metric_row(state: OptimizerState, env, config: ExperimentConfig) -> MetricRow:
    row = MetricRow(t=state.t)
    model = getattr(env, "model", None)
    if model is not None:
        need_hess = state.H is not None
        an = chain_oracle.analyze(model, state.theta, hessian=need_hess)
        row.grad_norm_sq = float(an.gradJ @ an.gradJ)
        row.z_err_sq = float(np.sum((state.Z - an.gradJ) ** 2))
        row.J_exact = an.J
        if need_hess:
            diff = state.H - an.hessJ
            row.hess_err_sq = float(np.sum(diff * diff))
    n_eval = config.env.eval_rollout
    if n_eval > 0:
        rng_eval = substream(config.seed, EVAL_STREAM, state.t)
        row.avg_cost = env.eval_average_cost(
            state.theta, n_eval, rng_eval, warmup=config.env.eval_warmup
        )
    return row


# ---------------------------------------------------------------------------
# Checkpointing

CHECKPOINT_FORMAT = "sfopt-checkpoint-v1"


def _rows_to_lists(rows):
    return [
        [r.t, r.grad_norm_sq, r.hess_err_sq, r.z_err_sq, r.avg_cost, r.J_exact]
        for r in rows
    ]


def _rows_from_lists(data):
    return [
        MetricRow(
            t=int(v[0]),
            grad_norm_sq=v[1],
            hess_err_sq=v[2],
            z_err_sq=v[3],
            avg_cost=v[4],
            J_exact=v[5],
        )
        for v in data
    ]


def save_checkpoint(
    path: str,
    config: ExperimentConfig,
    state: OptimizerState,
    rngs: RunRngs,
    env,
    rows,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "t": state.t,
        "theta": state.theta.tolist(),
        "H": None if state.H is None else state.H.tolist(),
        "Z": state.Z.tolist(),
        "rng_perturbation": rngs.perturbation.bit_generator.state,
        "rng_environment": rngs.environment.bit_generator.state,
        "env_state": env.state_dict(),
        "rows": _rows_to_lists(rows),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def _restore_generator(state_dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state_dict
    return np.random.Generator(bg)


def load_checkpoint(path: str, config: ExperimentConfig):
    """Restore (state, rngs, rows) from a checkpoint written for this config."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"unrecognized checkpoint format in {path}")
    expect = config_hash(config)
    if payload["config_hash"] != expect:
        raise CorruptCheckpoint(
            f"checkpoint config hash {payload['config_hash']} != current {expect}"
        )
    state = OptimizerState(
        theta=np.array(payload["theta"], dtype=float),
        H=None if payload["H"] is None else np.array(payload["H"], dtype=float),
        Z=np.array(payload["Z"], dtype=float),
        t=int(payload["t"]),
    )
    rngs = RunRngs(
        perturbation=_restore_generator(payload["rng_perturbation"]),
        environment=_restore_generator(payload["rng_environment"]),
    )
    return state, rngs, _rows_from_lists(payload["rows"]), payload["env_state"]


# ---------------------------------------------------------------------------
# Run loop


def run(
    config: ExperimentConfig,
    env,
    probe: Optional[Callable[[OptimizerState, MetricRow], None]] = None,
    checkpoint_every: int = 0,
    checkpoint_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
) -> RunTrace:
    """Execute the configured run and return its metric trace.

    Metrics are recorded on the configured grid; `probe`, when given, sees
    the raw optimizer state at every recorded row. Checkpoints (one JSON
    file per interval) land in checkpoint_dir; resuming from any of them
    reproduces the uninterrupted trace bit-exactly. On an environment or
    solver error the partial trace is returned with a failure status.
    """
    config.validate()
    chash = config_hash(config)
    if resume_from is not None:
        state, rngs, rows, env_state = load_checkpoint(resume_from, config)
        env.load_state_dict(env_state)
    else:
        state = initial_state(config, env)
        rngs = RunRngs.from_seed(config.seed)
        rows = []
    trace = RunTrace(config_hash=chash, seed=config.seed, rows=rows)
    grid = set(record_grid(config.horizon, config.record_grid, config.eval_every))
    recorded = {r.t for r in rows}
    box = config.box()
    step_fn = gsf1_step if config.algorithm == "gsf1" else nsf1_step
    if checkpoint_every > 0 and checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    try:
        while True:
            t = state.t
            if t in grid and t not in recorded:
                row = _metric_row(state, env, config)
                rows.append(row)
                recorded.add(t)
                if probe is not None:
                    probe(state, row)
            if (
                checkpoint_every > 0
                and checkpoint_dir is not None
                and t > 0
                and t % checkpoint_every == 0
            ):
                path = os.path.join(checkpoint_dir, f"checkpoint_{t:012d}.json")
                save_checkpoint(path, config, state, rngs, env, rows)
            if t >= config.horizon:
                break
            state = step_fn(state, env, config, rngs, _box=box)
    except Exception as exc:  # noqa: BLE001 - partial trace carries the reason
        trace.status = f"failed at t={state.t}: {exc}"
        return trace
    trace.status = "ok"
    return trace
