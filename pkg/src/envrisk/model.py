"""Domain types for the multi-line risk model with a latent environment.

A model consists of ``n`` business lines, each a Cramer-Lundberg surplus
process ``X_i(t) = u_i + r_i t - sum_k C_k``, whose claim intensity and
claim-size law depend on a discrete environmental state ``j``.

States are indexed from 0 throughout the library.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from .numerics import find_root

_MGF_EDGE = 1e-9
_ROOT_TOL = 1e-10


class ModelError(ValueError):
    """Invalid model specification."""


class DomainError(ValueError):
    """Argument outside the moment generating function domain."""


class NetProfitError(ValueError):
    """Net profit condition violated where it is required."""


@dataclass(frozen=True)
class ExponentialClaims:
    """Exponential claim sizes with the given rate (mean ``1/rate``)."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ModelError(f"exponential rate must be positive, got {self.rate}")

    @classmethod
    def from_mean(cls, mean: float) -> ExponentialClaims:
        if not mean > 0:
            raise ModelError(f"exponential mean must be positive, got {mean}")
        return cls(1.0 / mean)

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    @property
    def mgf_sup(self) -> float:
        """Supremum of the MGF domain."""
        return self.rate

    def _check(self, s):
        if np.any(np.asarray(s) >= self.rate):
            raise DomainError(f"MGF of Exp({self.rate}) undefined at s={s}")

    def mgf(self, s):
        self._check(s)
        return self.rate / (self.rate - s)

    def mgf_d1(self, s):
        self._check(s)
        return self.rate / (self.rate - s) ** 2

    def mgf_d2(self, s):
        self._check(s)
        return 2.0 * self.rate / (self.rate - s) ** 3

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(x >= 0, math.log(self.rate) - self.rate * x, -np.inf)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size)

    def to_dict(self) -> dict:
        return {"type": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class GaussianClaims:
    """Gaussian claim sizes; negative claims (inflows) are allowed."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ModelError(f"gaussian std must be positive, got {self.std}")

    mgf_sup = math.inf

    def mgf(self, s):
        return np.exp(self.mean * s + 0.5 * self.std**2 * s**2)

    def mgf_d1(self, s):
        return (self.mean + self.std**2 * s) * self.mgf(s)

    def mgf_d2(self, s):
        return ((self.mean + self.std**2 * s) ** 2 + self.std**2) * self.mgf(s)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - 0.5 * math.log(2 * math.pi)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.normal(self.mean, self.std, size)

    def to_dict(self) -> dict:
        return {"type": "gaussian", "mean": self.mean, "std": self.std}


ClaimDistribution = Union[ExponentialClaims, GaussianClaims]


def mgf(dist: ClaimDistribution, s: float) -> float:
    """Moment generating function ``E[exp(s C)]``; raises DomainError off-domain."""
    return float(dist.mgf(s))


@dataclass(frozen=True)
class BusinessLine:
    """Premium rate plus per-state claim intensities and claim laws."""

    premium: float
    intensities: tuple[float, ...]
    claims: tuple[ClaimDistribution, ...]

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(float(x) for x in self.intensities))
        object.__setattr__(self, "claims", tuple(self.claims))
        if self.premium < 0:
            raise ModelError(f"premium rate must be >= 0, got {self.premium}")
        if len(self.intensities) != len(self.claims):
            raise ModelError("intensities and claims must have one entry per state")
        if not self.intensities:
            raise ModelError("a business line needs at least one state")
        if any(not lam > 0 for lam in self.intensities):
            raise ModelError(f"claim intensities must be positive, got {self.intensities}")

    @property
    def n_states(self) -> int:
        return len(self.intensities)


@dataclass(frozen=True)
class Fixed:
    """The environment stays in ``state`` forever."""

    state: int = 0


@dataclass(frozen=True)
class SwitchAt:
    """State ``source`` through period ``after_period``, ``target`` from the next period on."""

    after_period: int
    source: int
    target: int


@dataclass(frozen=True)
class Resampled:
    """A fresh state is drawn from the environment probabilities every period."""


Dynamics = Union[Fixed, SwitchAt, Resampled]


@dataclass(frozen=True)
class EnvironmentSpec:
    probabilities: tuple[float, ...]
    dynamics: Dynamics = field(default_factory=Fixed)

    def __post_init__(self):
        p = tuple(float(x) for x in self.probabilities)
        object.__setattr__(self, "probabilities", p)
        if not p:
            raise ModelError("environment needs at least one state")
        if any(x < 0 or x > 1 for x in p) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise ModelError(f"state probabilities must form a distribution, got {p}")
        J = len(p)
        d = self.dynamics
        states = {Fixed: lambda: [d.state], SwitchAt: lambda: [d.source, d.target]}
        for s in states.get(type(d), list)():
            if not 0 <= s < J:
                raise ModelError(f"dynamics state {s} outside 0..{J - 1}")
        if isinstance(d, SwitchAt) and d.after_period < 0:
            raise ModelError("switch period must be non-negative")

    @property
    def n_states(self) -> int:
        return len(self.probabilities)

    @classmethod
    def uniform(cls, n_states: int, dynamics: Dynamics | None = None) -> EnvironmentSpec:
        return cls((1.0 / n_states,) * n_states, dynamics or Fixed())


@dataclass(frozen=True)
class ModelSpec:
    lines: tuple[BusinessLine, ...]
    environment: EnvironmentSpec

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        if not self.lines:
            raise ModelError("model needs at least one business line")
        J = self.environment.n_states
        for i, line in enumerate(self.lines):
            if line.n_states != J:
                raise ModelError(f"line {i} has {line.n_states} states, environment has {J}")

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_states(self) -> int:
        return self.environment.n_states

    @property
    def intensity_matrix(self) -> np.ndarray:
        """Claim intensities as an ``(n_lines, n_states)`` array."""
        return np.array([line.intensities for line in self.lines])

    @property
    def premiums(self) -> np.ndarray:
        return np.array([line.premium for line in self.lines])

    def with_environment(self, environment: EnvironmentSpec) -> ModelSpec:
        return ModelSpec(self.lines, environment)


# -- cumulant machinery ------------------------------------------------------


def kappa(line: BusinessLine, state: int, s: float) -> float:
    """``lambda (B[s] - 1) - r s`` for the given state."""
    lam, dist = line.intensities[state], line.claims[state]
    return float(lam * (dist.mgf(s) - 1.0) - line.premium * s)


def kappa_prime(line: BusinessLine, state: int, s: float) -> float:
    lam, dist = line.intensities[state], line.claims[state]
    return float(lam * dist.mgf_d1(s) - line.premium)


def kappa_second(line: BusinessLine, state: int, s: float) -> float:
    lam, dist = line.intensities[state], line.claims[state]
    return float(lam * dist.mgf_d2(s))


def drift(line: BusinessLine, state: int) -> float:
    """Expected surplus growth per unit time, ``r - lambda E[C]``."""
    return line.premium - line.intensities[state] * line.claims[state].mean


def net_profit(line: BusinessLine, state: int) -> bool:
    return line.intensities[state] * line.claims[state].mean < line.premium


def lundberg_root(line: BusinessLine, state: int) -> float:
    """Unique positive zero of kappa, found by bisection.

    Raises:
        NetProfitError: if ``lambda E[C] >= r`` (no positive root exists).
    """
    if not net_profit(line, state):
        raise NetProfitError(
            f"net profit condition fails: lambda*E[C]="
            f"{line.intensities[state] * line.claims[state].mean} >= r={line.premium}"
        )
    sup = line.claims[state].mgf_sup
    f = lambda s: kappa(line, state, s)  # noqa: E731
    if math.isfinite(sup):
        hi = sup - _MGF_EDGE
    else:
        hi = 1.0
        while f(hi) <= 0:
            hi *= 2.0
    # kappa < 0 just right of zero; step down until we are on that side
    lo = min(1e-6, hi / 2)
    while f(lo) >= 0:
        lo /= 2.0
        if lo < 1e-300:
            raise NetProfitError("could not bracket the Lundberg root")
    return find_root(f, lo, hi, _ROOT_TOL)


# -- configuration -----------------------------------------------------------


def claims_from_dict(d: dict) -> ClaimDistribution:
    kind = str(d.get("type", "")).lower()
    if kind in ("exponential", "exp"):
        if "rate" in d:
            return ExponentialClaims(float(d["rate"]))
        if "mean" in d:
            return ExponentialClaims.from_mean(float(d["mean"]))
        raise ModelError("exponential claims need 'rate' or 'mean'")
    if kind in ("gaussian", "normal"):
        try:
            return GaussianClaims(float(d["mean"]), float(d["std"]))
        except KeyError as exc:
            raise ModelError(f"gaussian claims missing {exc}") from None
    raise ModelError(f"unknown claim distribution type {d.get('type')!r}")


def dynamics_from_dict(d: dict | None) -> Dynamics:
    if d is None:
        return Fixed()
    kind = str(d.get("type", "")).lower()
    if kind == "fixed":
        return Fixed(int(d.get("state", 0)))
    if kind in ("switch", "switch_at"):
        return SwitchAt(int(d["after_period"]), int(d["from"]), int(d["to"]))
    if kind == "resampled":
        return Resampled()
    raise ModelError(f"unknown dynamics type {d.get('type')!r}")


def dynamics_to_dict(d: Dynamics) -> dict:
    if isinstance(d, Fixed):
        return {"type": "fixed", "state": d.state}
    if isinstance(d, SwitchAt):
        return {"type": "switch", "after_period": d.after_period, "from": d.source, "to": d.target}
    return {"type": "resampled"}


def model_from_dict(d: dict[str, Any]) -> ModelSpec:
    """Build a ModelSpec from the JSON configuration schema (see README)."""
    try:
        env = d["environment"]
        p = env.get("p")
        J = int(env.get("J", len(p) if p is not None else 0))
        if p is None:
            p = [1.0 / J] * J
        if len(p) != J:
            raise ModelError(f"environment J={J} but {len(p)} probabilities given")
        environment = EnvironmentSpec(tuple(p), dynamics_from_dict(env.get("dynamics")))
        lines = []
        for spec in d["lines"]:
            lam = spec["lambda"]
            if isinstance(lam, (int, float)):
                lam = [lam] * J
            claims = spec["claims"]
            if isinstance(claims, dict):
                claims = [claims] * len(lam)
            lines.append(
                BusinessLine(
                    float(spec["r"]),
                    tuple(float(x) for x in lam),
                    tuple(claims_from_dict(c) for c in claims),
                )
            )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model configuration: {exc!r}") from None
    return ModelSpec(tuple(lines), environment)


def model_to_dict(model: ModelSpec) -> dict[str, Any]:
    env = model.environment
    return {
        "lines": [
            {
                "r": line.premium,
                "lambda": list(line.intensities),
                "claims": [c.to_dict() for c in line.claims],
            }
            for line in model.lines
        ],
        "environment": {
            "J": env.n_states,
            "p": list(env.probabilities),
            "dynamics": dynamics_to_dict(env.dynamics),
        },
    }


def load_config(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        return json.load(fh)


def load_model(path: str | Path) -> ModelSpec:
    return model_from_dict(load_config(path))
