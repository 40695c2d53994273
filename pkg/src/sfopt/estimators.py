"""One-sample smoothed-functional gradient and Hessian estimators.

Both estimators share a single noisy cost evaluation taken at the
Gaussian-perturbed parameter; they are pure functions of the perturbation,
the smoothing radius and that one cost sample.
"""

from __future__ import annotations

import math

import numpy as np


class NonFiniteCost(ValueError):
    """The cost sample fed to an estimator is nan or infinite."""


def _check(beta: float, cost: float) -> None:
    if beta <= 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not math.isfinite(cost):
        raise NonFiniteCost(f"cost sample is not finite: {cost}")


def sf_gradient_sample(eta: np.ndarray, beta: float, cost: float) -> np.ndarray:
    """Gradient sample eta * cost / beta."""
    _check(beta, cost)
    return eta * (cost / beta)


def sf_hessian_sample(eta: np.ndarray, beta: float, cost: float) -> np.ndarray:
    """Hessian sample: (eta_i^2 - 1) * cost / beta^2 on the diagonal,
    eta_i * eta_j * cost / beta^2 off it.

    The result is bitwise symmetric: the off-diagonal entries come from an
    outer product and the diagonal is overwritten in place.
    """
    _check(beta, cost)
    h = np.outer(eta, eta)
    np.fill_diagonal(h, eta * eta - 1.0)
    h *= cost / (beta * beta)
    return h
