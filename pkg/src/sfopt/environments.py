"""Simulation environments implementing the noisy-cost contract.

An environment owns its internal state (chain state or car state) and
exposes:

    dim()                              parameter dimension d
    step(theta_perturbed, rng)         advance one transition under the
                                       perturbed parameter, return the cost
    eval_average_cost(theta, n, rng,   mean cost of the last n steps of a
                      warmup=0)        frozen-theta rollout on a private
                                       copy (training state untouched)
    state_dict() / load_state_dict()   checkpoint support

Chain environments additionally carry `.model`, the differentiable
ChainModel used by the exact oracle; mountain car has no oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .chain_oracle import ChainModel, sample_from_cumulative
from .core import EnvSpec, ValidationError, standard_normals, substream


class Env(Protocol):
    def dim(self) -> int: ...

    def step(self, theta_perturbed: np.ndarray, rng: np.random.Generator) -> float: ...

    def eval_average_cost(
        self, theta: np.ndarray, n_steps: int, rng: np.random.Generator, warmup: int = 0
    ) -> float: ...

    def state_dict(self) -> dict: ...

    def load_state_dict(self, state: dict) -> None: ...


class DimensionMismatch(ValueError):
    """Parameter vector length does not match the architecture."""


# ---------------------------------------------------------------------------
# Softmax-parameterized finite chain


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ChainEnv:
    """Finite chain with P_theta[s] = softmax(W_s theta + b_s) and cost
    h(theta, s) = c_s + 0.5 * ||theta - mu_s||^2.

    W has shape (N, N, d): W[s, t] are the logit weights of the s -> t
    entry. The softmax Jacobian gives exact transition derivatives, so the
    chain oracle is available for this family.
    """

    def __init__(
        self,
        W: np.ndarray,
        b: np.ndarray,
        c: np.ndarray,
        mu: np.ndarray,
        x0: int = 0,
    ):
        self.W = W
        self.b = b
        self.c = c
        self.mu = mu
        self.n_states, _, self.d = W.shape
        self.state = x0
        self.model = ChainModel(
            n_states=self.n_states,
            dim=self.d,
            transition=self.transition,
            cost=self.cost_vector,
            dtransition=self.dtransition,
            dcost=self.dcost,
        )

    def dim(self) -> int:
        return self.d

    def transition(self, theta: np.ndarray) -> np.ndarray:
        return _softmax_rows(self.W @ theta + self.b)

    def cost_vector(self, theta: np.ndarray) -> np.ndarray:
        diff = theta[None, :] - self.mu
        return self.c + 0.5 * np.sum(diff * diff, axis=1)

    def dtransition(self, theta: np.ndarray, k: int) -> np.ndarray:
        P = self.transition(theta)
        Wk = self.W[:, :, k]
        row_mean = np.sum(P * Wk, axis=1, keepdims=True)
        return P * (Wk - row_mean)

    def dcost(self, theta: np.ndarray, k: int) -> np.ndarray:
        return theta[k] - self.mu[:, k]

    def step(self, theta_perturbed: np.ndarray, rng: np.random.Generator) -> float:
        P = self.transition(theta_perturbed)
        self.state = sample_from_cumulative(rng, np.cumsum(P[self.state]))
        diff = theta_perturbed - self.mu[self.state]
        return float(self.c[self.state] + 0.5 * (diff @ diff))

    def eval_average_cost(
        self, theta: np.ndarray, n_steps: int, rng: np.random.Generator, warmup: int = 0
    ) -> float:
        """Mean cost of the last n_steps of a frozen-theta rollout of length
        warmup + n_steps, run on a copy of the current chain state."""
        if n_steps <= 0:
            raise ValueError("n_steps must be positive")
        cum = np.cumsum(self.transition(theta), axis=1)
        h = self.cost_vector(theta)
        us = rng.random(warmup + n_steps)
        x = self.state
        total = 0.0
        n_last = self.n_states - 1
        for i, u in enumerate(us):
            x = min(int(np.searchsorted(cum[x], u, side="right")), n_last)
            if i >= warmup:
                total += h[x]
        return total / n_steps

    def state_dict(self) -> dict:
        return {"state": int(self.state)}

    def load_state_dict(self, state: dict) -> None:
        self.state = int(state["state"])


def chain_env_make(
    gen_seed: int,
    n_states: int,
    d: int,
    logit_scale: float = 1.0,
    cost_offset_scale: float = 1.0,
    mu_scale: float = 1.0,
) -> ChainEnv:
    """Generate a chain family deterministically from gen_seed.

    logit_scale = 0 makes the transitions theta-independent, leaving a pure
    quadratic average cost with Hessian exactly the identity.
    """
    if n_states < 2:
        raise ValidationError(f"n_states must be >= 2, got {n_states}")
    if d < 1:
        raise ValidationError(f"d must be >= 1, got {d}")
    rng = substream(gen_seed, 1009)
    W = logit_scale / math.sqrt(d) * standard_normals(rng, n_states * n_states * d).reshape(
        n_states, n_states, d
    )
    b = standard_normals(rng, n_states * n_states).reshape(n_states, n_states)
    c = cost_offset_scale * rng.random(n_states)
    mu = mu_scale * standard_normals(rng, n_states * d).reshape(n_states, d)
    return ChainEnv(W=W, b=b, c=c, mu=mu)


# ---------------------------------------------------------------------------
# Two-layer tanh policy


def unpack_policy(theta: np.ndarray, hidden: int):
    """Split the flat parameter vector into (W1, b1, w2, b2)."""
    d = 4 * hidden + 1
    if theta.shape != (d,):
        raise DimensionMismatch(f"policy with hidden={hidden} needs {d} parameters, got {theta.shape}")
    W1 = theta[: 2 * hidden].reshape(hidden, 2)
    b1 = theta[2 * hidden : 3 * hidden]
    w2 = theta[3 * hidden : 4 * hidden]
    b2 = theta[4 * hidden]
    return W1, b1, w2, b2


# Network inputs are fed at O(1) scale: position is already order one,
# velocity (|v| <= 0.07) is divided by its bound so that
# velocity-responsive policies exist at order-one weights.
STATE_SCALE = np.array([1.0, 1.0 / 0.07])


def policy_forward(theta: np.ndarray, state: np.ndarray, hidden: int) -> float:
    """tanh(w2' tanh(W1 s + b1) + b2) on the scaled state, always in [-1, 1]."""
    W1, b1, w2, b2 = unpack_policy(theta, hidden)
    a = np.tanh(W1 @ (STATE_SCALE * state) + b1)
    return float(np.tanh(w2 @ a + b2))


def policy_action_grad(theta: np.ndarray, state: np.ndarray, hidden: int) -> np.ndarray:
    """Analytic gradient of the action w.r.t. theta (testing aid only)."""
    W1, b1, w2, b2 = unpack_policy(theta, hidden)
    s = STATE_SCALE * state
    pre1 = W1 @ s + b1
    a = np.tanh(pre1)
    u = math.tanh(float(w2 @ a + b2))
    du = 1.0 - u * u
    da = (1.0 - a * a) * w2 * du
    g = np.empty_like(theta)
    g[: 2 * hidden] = np.outer(da, s).reshape(-1)
    g[2 * hidden : 3 * hidden] = da
    g[3 * hidden : 4 * hidden] = du * a
    g[4 * hidden] = du
    return g


# ---------------------------------------------------------------------------
# Infinite-horizon continuous mountain car

X_MIN, X_MAX = -1.2, 0.6
V_MAX = 0.07
FORCE_GAIN = 0.0015
GRAVITY = 0.0025
TARGET_X = 0.45


@dataclass
class CarState:
    x: float
    v: float


def mountaincar_step(
    state: CarState,
    theta_perturbed: np.ndarray,
    rng: Optional[np.random.Generator],
    hidden: int,
    noise_std: float = 0.0,
) -> tuple:
    """One transition of the noisy mountain car under the tanh policy.

    Velocity picks up the bounded force, gravity and (optionally) Gaussian
    noise, then both coordinates are clamped; hitting a position wall
    zeroes the velocity instead of resetting the episode. Returns the new
    state and the running cost 0.1 u^2 + (x' - 0.45)^2.
    """
    u = policy_forward(theta_perturbed, np.array([state.x, state.v]), hidden)
    noise = 0.0
    if noise_std > 0.0 and rng is not None:
        noise = noise_std * standard_normals(rng, 1)[0]
    v = state.v + FORCE_GAIN * u - GRAVITY * math.cos(3.0 * state.x) + noise
    v = min(max(v, -V_MAX), V_MAX)
    x = state.x + v
    if x <= X_MIN:
        x, v = X_MIN, 0.0
    elif x >= X_MAX:
        x, v = X_MAX, 0.0
    cost = 0.1 * u * u + (x - TARGET_X) ** 2
    return CarState(x=x, v=v), cost


class MountainCarEnv:
    """Average-cost mountain car: no terminal states, no resets."""

    def __init__(self, hidden: int = 8, noise_std: float = 1e-3, x0: float = -0.5, v0: float = 0.0):
        self.hidden = hidden
        self.noise_std = noise_std
        self.x0 = x0
        self.v0 = v0
        self.car = CarState(x=x0, v=v0)

    def dim(self) -> int:
        return 4 * self.hidden + 1

    def step(self, theta_perturbed: np.ndarray, rng: np.random.Generator) -> float:
        self.car, cost = mountaincar_step(
            self.car, theta_perturbed, rng, self.hidden, self.noise_std
        )
        return cost

    def eval_average_cost(
        self, theta: np.ndarray, n_steps: int, rng: np.random.Generator, warmup: int = 0
    ) -> float:
        """Mean of the last n_steps costs of a frozen-policy rollout of
        length warmup + n_steps from the canonical start state (so curves
        recorded at different times are comparable); training state untouched."""
        if n_steps <= 0:
            raise ValueError("n_steps must be positive")
        car = CarState(x=self.x0, v=self.v0)
        total = 0.0
        for i in range(warmup + n_steps):
            car, cost = mountaincar_step(car, theta, rng, self.hidden, self.noise_std)
            if i >= warmup:
                total += cost
        return total / n_steps

    def state_dict(self) -> dict:
        return {"x": self.car.x, "v": self.car.v}

    def load_state_dict(self, state: dict) -> None:
        self.car = CarState(x=float(state["x"]), v=float(state["v"]))


def make_env(spec: EnvSpec):
    """Build the environment described by an EnvSpec."""
    spec.validate()
    if spec.kind == "chain":
        return chain_env_make(
            spec.gen_seed,
            spec.n_states,
            spec.dim,
            logit_scale=spec.logit_scale,
            cost_offset_scale=spec.cost_offset_scale,
            mu_scale=spec.mu_scale,
        )
    return MountainCarEnv(hidden=spec.hidden, noise_std=spec.noise_std)
