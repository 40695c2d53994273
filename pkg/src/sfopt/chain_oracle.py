"""Exact analytics for finite parameter-dependent Markov chains.

Given a differentiable family (P_theta, h_theta) this module computes the
stationary distribution, the fundamental matrix, the long-run average cost
J(theta) = pi . h, its closed-form gradient

    dJ/dtheta_k = pi' (dP/dtheta_k) Zfund h  +  pi' dh/dtheta_k,

and a finite-difference Hessian of that gradient. These are the ground
truth against which the stochastic estimators and the finite-time rate
diagnostics are measured.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class NoConvergence(RuntimeError):
    """Power iteration failed to converge (chain may be reducible or periodic)."""


class SingularMatrix(RuntimeError):
    """The fundamental-matrix system could not be solved to tolerance."""


def stationary_distribution(
    P: np.ndarray,
    tol: float = 1e-12,
    max_sweeps: int = 1_000_000,
) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix by power iteration.

    Iterates pi <- pi P from two different starting vectors; disagreement
    between the two fixed points flags a chain with multiple stationary
    distributions (reducible), which is reported as NoConvergence, as is
    failure to settle within max_sweeps (periodic chains oscillate forever).
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n):
        raise ValueError(f"P must be square, got {P.shape}")
    if np.any(P < -1e-12) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("P must be row-stochastic")

    def iterate(start: np.ndarray) -> np.ndarray:
        pi = start / start.sum()
        for _ in range(max_sweeps):
            nxt = pi @ P
            nxt /= nxt.sum()
            if np.max(np.abs(nxt - pi)) <= tol:
                return nxt
            pi = nxt
        raise NoConvergence(
            f"power iteration did not converge in {max_sweeps} sweeps "
            "(chain may be reducible or periodic)"
        )

    pi_a = iterate(np.full(n, 1.0 / n))
    pi_b = iterate(1.0 + np.arange(n, dtype=float))
    if np.max(np.abs(pi_a - pi_b)) > 1e-8:
        raise NoConvergence(
            "distinct starting vectors reached different fixed points: "
            "multiple stationary distributions (reducible chain)"
        )
    return pi_a


def fundamental_matrix(P: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Inverse of (I - P + 1 pi'), checked to residual 1e-8."""
    P = np.asarray(P, dtype=float)
    pi = np.asarray(pi, dtype=float)
    n = P.shape[0]
    A = np.eye(n) - P + np.outer(np.ones(n), pi)
    try:
        Z = np.linalg.solve(A, np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"(I - P + 1 pi') is singular: {exc}") from exc
    residual = np.max(np.abs(Z @ A - np.eye(n)))
    if residual > 1e-8:
        raise SingularMatrix(f"fundamental matrix residual {residual:.3e} exceeds 1e-8")
    return Z


@dataclass(frozen=True)
class ChainModel:
    """Differentiable finite-chain family.

    transition(theta) -> row-stochastic (N, N); cost(theta) -> (N,);
    dtransition(theta, k) -> d transition / d theta_k; dcost(theta, k)
    -> d cost / d theta_k.
    """

    n_states: int
    dim: int
    transition: Callable[[np.ndarray], np.ndarray]
    cost: Callable[[np.ndarray], np.ndarray]
    dtransition: Callable[[np.ndarray, int], np.ndarray]
    dcost: Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class ChainAnalytics:
    """Bundle of exact quantities at one parameter point."""

    pi: np.ndarray
    zfund: np.ndarray
    J: float
    gradJ: np.ndarray
    hessJ: Optional[np.ndarray] = None


def average_cost(model: ChainModel, theta: np.ndarray) -> float:
    """Long-run average cost pi' h at theta."""
    P = model.transition(theta)
    pi = stationary_distribution(P)
    return float(pi @ model.cost(theta))


def grad_J(model: ChainModel, theta: np.ndarray) -> np.ndarray:
    """Closed-form gradient of the average cost via the fundamental matrix."""
    P = model.transition(theta)
    h = model.cost(theta)
    pi = stationary_distribution(P)
    Z = fundamental_matrix(P, pi)
    Zh = Z @ h
    g = np.empty(model.dim)
    for k in range(model.dim):
        g[k] = pi @ (model.dtransition(theta, k) @ Zh) + pi @ model.dcost(theta, k)
    return g


def hess_J(model: ChainModel, theta: np.ndarray, delta: float = 1e-4) -> np.ndarray:
    """Hessian of the average cost by central differences of grad_J.

    Differencing the analytic gradient (rather than second differences of
    J) gains an order of accuracy; the raw difference matrix is symmetric
    to O(delta^2) and is symmetrized as (A + A') / 2.
    """
    theta = np.asarray(theta, dtype=float)
    d = model.dim
    A = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = delta
        A[:, k] = (grad_J(model, theta + e) - grad_J(model, theta - e)) / (2.0 * delta)
    return 0.5 * (A + A.T)


def analyze(model: ChainModel, theta: np.ndarray, hessian: bool = False) -> ChainAnalytics:
    """Compute pi, Zfund, J, gradJ (and optionally hessJ) in one pass."""
    P = model.transition(theta)
    h = model.cost(theta)
    pi = stationary_distribution(P)
    Z = fundamental_matrix(P, pi)
    Zh = Z @ h
    g = np.empty(model.dim)
    for k in range(model.dim):
        g[k] = pi @ (model.dtransition(theta, k) @ Zh) + pi @ model.dcost(theta, k)
    H = hess_J(model, theta) if hessian else None
    return ChainAnalytics(pi=pi, zfund=Z, J=float(pi @ h), gradJ=g, hessJ=H)


def sample_next_state(rng: np.random.Generator, P: np.ndarray, s: int) -> int:
    """Draw the successor of state s from row s of P."""
    return sample_from_cumulative(rng, np.cumsum(P[s]))


def sample_from_cumulative(rng: np.random.Generator, cumrow: np.ndarray) -> int:
    """Inverse-CDF draw from a precomputed cumulative row (fast path)."""
    u = rng.random()
    idx = int(np.searchsorted(cumrow, u, side="right"))
    return min(idx, len(cumrow) - 1)
