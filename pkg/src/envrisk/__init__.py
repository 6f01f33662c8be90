"""Ruin probabilities, environment calibration and reserve allocation for
multi-line insurance portfolios driven by a latent environmental state."""

__version__ = "0.1.0"

from .allocate import AllocationProblem, AllocationResult, kkt_report, solve
from .calibrate import PosteriorState, calibrate
from .model import (
    BusinessLine,
    EnvironmentSpec,
    ExponentialClaims,
    GaussianClaims,
    ModelSpec,
    lundberg_root,
)
from .ruin import SubsetConstraintSpec, SubsetMode, ruin_arfwedson, ruin_exact_exponential, ruin_prob
from .simulate import PeriodGrid, monte_carlo_ruin, simulate_observations

__all__ = [
    "AllocationProblem",
    "AllocationResult",
    "BusinessLine",
    "EnvironmentSpec",
    "ExponentialClaims",
    "GaussianClaims",
    "ModelSpec",
    "PeriodGrid",
    "PosteriorState",
    "SubsetConstraintSpec",
    "SubsetMode",
    "calibrate",
    "kkt_report",
    "lundberg_root",
    "monte_carlo_ruin",
    "ruin_arfwedson",
    "ruin_exact_exponential",
    "ruin_prob",
    "simulate_observations",
    "solve",
]
