"""Canned models for the four worked examples.

Matrices are indexed ``[line][state]``. Example 2 comes in four variants:
baseline, state-dependent claim sizes, a wider intensity spread and a pair
of identical states.
"""

from __future__ import annotations

from .model import (
    BusinessLine,
    EnvironmentSpec,
    ExponentialClaims,
    Fixed,
    GaussianClaims,
    ModelSpec,
    Resampled,
    SwitchAt,
)

EXAMPLE1_LAMBDA = ((0.5, 0.7, 0.92), (0.6, 0.6, 0.6))
EXAMPLE3_MEANS = ((1.0, 0.65, 0.4), (1.0, 0.65, 0.4))
EXAMPLE3_LAMBDA = ((0.50, 0.70, 0.92), (0.92, 0.70, 0.50))
EXAMPLE4_LAMBDA = (
    (0.709, 0.544, 0.609, 0.536, 0.580),
    (0.611, 0.537, 0.588, 0.541, 0.725),
    (0.730, 0.601, 0.636, 0.620, 0.691),
    (0.639, 0.605, 0.638, 0.713, 0.591),
    (0.637, 0.615, 0.600, 0.623, 0.740),
)
# Example 4 target reserves with the true state known
EXAMPLE4_ALL_RUIN_TARGET = (20.620, 14.553, 22.507, 15.985, 15.869)
EXAMPLE4_ANY_RUIN_TARGET = (116.173, 150.040, 119.690, 83.281, 108.053)


def exponential_model(lambdas, means, premiums=None, environment=None) -> ModelSpec:
    """Model with exponential claims given ``[line][state]`` intensities and means."""
    n, J = len(lambdas), len(lambdas[0])
    premiums = premiums or (1.0,) * n
    lines = tuple(
        BusinessLine(premiums[i], tuple(lambdas[i]), tuple(ExponentialClaims.from_mean(m) for m in means[i]))
        for i in range(n)
    )
    return ModelSpec(lines, environment or _true_state(J, 0))


def _true_state(J: int, state: int) -> EnvironmentSpec:
    return EnvironmentSpec(tuple(1.0 if j == state else 0.0 for j in range(J)), Fixed(state))


def example1() -> ModelSpec:
    """Two lines, three states, only line 1's intensity depends on the state."""
    return exponential_model(EXAMPLE1_LAMBDA, ((1.0,) * 3, (1.0,) * 3))


def example2(variant: str) -> ModelSpec:
    """Parameter sets a-d: baseline, state-dependent sizes, wider intensities, identical states."""
    means = ((1.0,) * 3, (1.0,) * 3)
    lam = EXAMPLE1_LAMBDA
    if variant == "a":
        pass
    elif variant == "b":
        means = ((1.0, 0.65, 0.4), (1.0,) * 3)
    elif variant == "c":
        lam = ((0.4, 0.7, 1.1), (0.6, 0.6, 0.6))
    elif variant == "d":
        lam = ((0.5, 0.5, 0.92), (0.6, 0.6, 0.6))
    else:
        raise ValueError(f"unknown Example 2 variant {variant!r}")
    return exponential_model(lam, means)


EXAMPLE2_VARIANTS = ("a", "b", "c", "d")


def example3_switch(after_period: int = 10) -> ModelSpec:
    """Example 1 with the state moving from 0 to 1 after ``after_period`` periods."""
    env = EnvironmentSpec((1.0, 0.0, 0.0), SwitchAt(after_period, 0, 1))
    return example1().with_environment(env)


def example3_resampled() -> ModelSpec:
    env = EnvironmentSpec((1 / 3, 1 / 3, 1 / 3), Resampled())
    return exponential_model(EXAMPLE3_LAMBDA, EXAMPLE3_MEANS, environment=env)


def example4() -> ModelSpec:
    """Five lines, five states, N(1, 1) claims, true state 0."""
    claims = (GaussianClaims(1.0, 1.0),) * 5
    lines = tuple(BusinessLine(1.0, row, claims) for row in EXAMPLE4_LAMBDA)
    return ModelSpec(lines, _true_state(5, 0))
