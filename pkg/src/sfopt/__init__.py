"""Multi-timescale smoothed-functional optimization of long-run average
costs, with exact finite-chain oracles and finite-time rate diagnostics."""

from . import chain_oracle, cli, core, diagnostics, environments, estimators, recursions
from .core import EnvSpec, ExperimentConfig, StepSchedule

__all__ = [
    "chain_oracle",
    "cli",
    "core",
    "diagnostics",
    "environments",
    "estimators",
    "recursions",
    "EnvSpec",
    "ExperimentConfig",
    "StepSchedule",
]

__version__ = "0.1.0"
