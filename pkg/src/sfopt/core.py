"""Shared numerics: step-size schedules, deterministic RNG sub-streams,
Gaussian perturbation sampling, and run configuration.

All randomness in a run is derived from a single 64-bit seed. Distinct
concerns get independent sub-streams (perturbations, environment noise,
evaluation rollouts, parameter init), so adding noise consumption in one
place never shifts the draws seen by another.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

MASK64 = (1 << 64) - 1

# Sub-stream keys hung off the run seed.
PERTURBATION_STREAM = 0
ENV_STREAM = 1
EVAL_STREAM = 2
THETA_INIT_STREAM = 3


class OrderingViolation(ValueError):
    """A step-size exponent ordering constraint does not hold."""


class ValidationError(ValueError):
    """A configuration value violates its contract."""


def substream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, key).

    Streams with different keys are statistically independent; the same
    (seed, key) always yields the same stream.
    """
    entropy = (seed & MASK64,) + tuple(k & MASK64 for k in key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def standard_normals(rng: np.random.Generator, n: int) -> np.ndarray:
    """n standard-normal draws via Box-Muller on the uniform stream.

    The transform is fixed here (rather than using the generator's own
    normal method) so that streams stay reproducible across numpy
    versions: only Generator.random() is consumed. Each call draws
    ceil(n/2) uniform pairs; an odd n discards the spare normal, so the
    uniform consumption per call is a pure function of n.
    """
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]: keeps log() finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


def sample_perturbation(rng: np.random.Generator, d: int) -> np.ndarray:
    """Length-d iid N(0,1) perturbation vector from the given stream."""
    if d < 1:
        raise ValidationError(f"perturbation dimension must be >= 1, got {d}")
    return standard_normals(rng, d)


@dataclass(frozen=True)
class RunRngs:
    """The two long-lived streams owned by one run (never shared)."""

    perturbation: np.random.Generator
    environment: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunRngs":
        return cls(
            perturbation=substream(seed, PERTURBATION_STREAM),
            environment=substream(seed, ENV_STREAM),
        )


@dataclass(frozen=True)
class StepSchedule:
    """Power-law step sizes a(t), c(t), b(t) with exponents sigma, alpha, nu.

    a(t) = a0*(1+t)^-sigma   slow scale, parameter update
    c(t) = c0*(1+t)^-alpha   intermediate scale, gradient tracking
    b(t) = b0*(1+t)^-nu      fast scale, Hessian tracking (three-timescale only)

    nu is None in two-timescale (gradient-only) mode. a0 = 0 is allowed as
    the documented way to freeze the parameter while the trackers run.
    """

    sigma: float
    alpha: float
    nu: Optional[float] = None
    a0: float = 1.0
    b0: float = 1.0
    c0: float = 1.0


def validate_schedule(schedule: StepSchedule, mode: str) -> StepSchedule:
    """Check exponent ordering and multiplier ranges for the given mode.

    mode "three_ts" requires 0 < nu < alpha < sigma < 1; "two_ts" requires
    0 < alpha < sigma < 1 with nu absent. Raises OrderingViolation naming
    the violated inequality.
    """
    if mode not in ("two_ts", "three_ts"):
        raise ValidationError(f"unknown schedule mode {mode!r}")
    s = schedule
    if mode == "three_ts":
        if s.nu is None:
            raise OrderingViolation("three-timescale schedule requires nu")
        checks = [
            (0.0 < s.nu, f"0 < nu violated (nu={s.nu})"),
            (s.nu < s.alpha, f"nu < alpha violated (nu={s.nu}, alpha={s.alpha})"),
            (s.alpha < s.sigma, f"alpha < sigma violated (alpha={s.alpha}, sigma={s.sigma})"),
            (s.sigma < 1.0, f"sigma < 1 violated (sigma={s.sigma})"),
        ]
    else:
        if s.nu is not None:
            raise OrderingViolation("two-timescale schedule must leave nu unset")
        checks = [
            (0.0 < s.alpha, f"0 < alpha violated (alpha={s.alpha})"),
            (s.alpha < s.sigma, f"alpha < sigma violated (alpha={s.alpha}, sigma={s.sigma})"),
            (s.sigma < 1.0, f"sigma < 1 violated (sigma={s.sigma})"),
        ]
    for ok, msg in checks:
        if not ok:
            raise OrderingViolation(msg)
    if s.a0 < 0.0:
        raise ValidationError(f"a0 must be >= 0, got {s.a0}")
    for name, mult in (("b0", s.b0), ("c0", s.c0)):
        if not (0.0 < mult <= 1.0):
            raise ValidationError(
                f"{name} must lie in (0, 1] so tracking stays a convex combination, got {mult}"
            )
    return schedule


def step_size(schedule: StepSchedule, which: str, t: int) -> float:
    """Evaluate one of the three step sequences at iteration t >= 0."""
    if t < 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    if which == "a":
        mult, exponent = schedule.a0, schedule.sigma
    elif which == "c":
        mult, exponent = schedule.c0, schedule.alpha
    elif which == "b":
        if schedule.nu is None:
            raise ValidationError("schedule has no fast step b (nu unset)")
        mult, exponent = schedule.b0, schedule.nu
    else:
        raise ValidationError(f"which must be one of 'a', 'b', 'c', got {which!r}")
    return mult * (1.0 + t) ** (-exponent)


@dataclass(frozen=True)
class EnvSpec:
    """Environment descriptor as it appears in run configs.

    kind "chain": softmax-parameterized finite chain with n_states states
    and dim parameters, generated deterministically from gen_seed.
    kind "mountaincar": infinite-horizon continuous mountain car driven by
    a two-layer tanh policy of the given hidden width.

    eval_rollout is the length of the frozen-parameter rollout used to
    estimate the average cost at recording points (0 disables empirical
    evaluation).
    """

    kind: str
    n_states: int = 5
    dim: int = 3
    gen_seed: int = 0
    logit_scale: float = 1.0
    cost_offset_scale: float = 1.0
    mu_scale: float = 1.0
    hidden: int = 8
    noise_std: float = 1e-3
    eval_rollout: int = 10_000
    eval_warmup: int = 0

    def param_dim(self) -> int:
        if self.kind == "chain":
            return self.dim
        if self.kind == "mountaincar":
            return 4 * self.hidden + 1
        raise ValidationError(f"unknown env kind {self.kind!r}")

    def validate(self) -> "EnvSpec":
        if self.kind == "chain":
            if self.n_states < 2:
                raise ValidationError(f"chain needs n_states >= 2, got {self.n_states}")
            if self.dim < 1:
                raise ValidationError(f"chain needs dim >= 1, got {self.dim}")
            if self.logit_scale < 0:
                raise ValidationError("logit_scale must be >= 0")
        elif self.kind == "mountaincar":
            if self.hidden < 1:
                raise ValidationError(f"mountaincar needs hidden >= 1, got {self.hidden}")
            if self.noise_std < 0:
                raise ValidationError("noise_std must be >= 0")
        else:
            raise ValidationError(f"unknown env kind {self.kind!r}")
        if self.eval_rollout < 0:
            raise ValidationError("eval_rollout must be >= 0")
        if self.eval_warmup < 0:
            raise ValidationError("eval_warmup must be >= 0")
        return self


ALGORITHMS = ("gsf1", "nsf1", "nsf1_diag")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one optimization run."""

    algorithm: str
    beta: float
    schedule: StepSchedule
    horizon: int
    env: EnvSpec
    box_lower: tuple = (-1.0,)
    box_upper: tuple = (1.0,)
    burn_in: int = 0
    pd_floor: float = 1e-3
    seed: int = 0
    eval_every: int = 1000
    record_grid: str = "geometric"  # or "linear" (rows every eval_every steps)
    theta0: Optional[tuple] = None
    theta0_jitter: float = 0.0

    def schedule_mode(self) -> str:
        return "two_ts" if self.algorithm == "gsf1" else "three_ts"

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not (self.beta > 0.0 and math.isfinite(self.beta)):
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if self.pd_floor <= 0.0:
            raise ValidationError(f"pd_floor must be positive, got {self.pd_floor}")
        if self.horizon < 0:
            raise ValidationError(f"horizon must be >= 0, got {self.horizon}")
        if self.burn_in < 0:
            raise ValidationError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.horizon > 0 and self.burn_in >= self.horizon:
            raise ValidationError(
                f"burn_in must be < horizon, got {self.burn_in} >= {self.horizon}"
            )
        if self.eval_every < 1:
            raise ValidationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.record_grid not in ("geometric", "linear"):
            raise ValidationError(f"record_grid must be 'geometric' or 'linear', got {self.record_grid!r}")
        if self.theta0_jitter < 0:
            raise ValidationError("theta0_jitter must be >= 0")
        self.env.validate()
        validate_schedule(self.schedule, self.schedule_mode())
        d = self.env.param_dim()
        lower, upper = self.box()
        if lower.shape != (d,) or upper.shape != (d,):
            raise ValidationError(
                f"box bounds must have length {d}, got {len(self.box_lower)} / {len(self.box_upper)}"
            )
        if not np.all(lower < upper):
            raise ValidationError("box_lower must be < box_upper componentwise")
        if self.theta0 is not None:
            th = np.asarray(self.theta0, dtype=float)
            if th.shape != (d,):
                raise ValidationError(f"theta0 must have length {d}, got {th.shape}")
            if not (np.all(th >= lower) and np.all(th <= upper)):
                raise ValidationError("theta0 must lie inside the projection box")
        return self

    def box(self) -> tuple:
        """Box bounds broadcast to the parameter dimension, as arrays."""
        d = self.env.param_dim()
        lower = np.asarray(self.box_lower, dtype=float)
        upper = np.asarray(self.box_upper, dtype=float)
        if lower.size == 1:
            lower = np.full(d, float(lower.reshape(-1)[0]))
        if upper.size == 1:
            upper = np.full(d, float(upper.reshape(-1)[0]))
        return lower, upper


def config_hash(config: ExperimentConfig) -> str:
    """Stable content hash used to pair checkpoints with their config."""
    payload = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
