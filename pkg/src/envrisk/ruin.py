"""Finite-time ruin probabilities for single lines and subsets of lines."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from .model import (
    BusinessLine,
    ExponentialClaims,
    ModelSpec,
    drift,
    kappa,
    kappa_prime,
    lundberg_root,
)
from .numerics import BracketError, QuadratureConfig, find_root, integrate

_ROOT_TOL = 1e-10
_CLAMP = 1e-9
_BOUNDARY_RTOL = 1e-9


class ArfwedsonError(ValueError):
    """The saddlepoint equations have no solution; use Monte Carlo instead."""


class NumericalQualityWarning(UserWarning):
    pass


class Method(str, Enum):
    AUTO = "auto"
    EXACT = "exact"
    ARFWEDSON = "arfwedson"
    MONTE_CARLO = "montecarlo"


class SubsetMode(str, Enum):
    ALL = "all"  # every line in the subset is ruined
    ANY = "any"  # at least one line in the subset is ruined
    AGGREGATE = "aggregate"  # the summed surplus of the subset is ruined


@dataclass(frozen=True)
class SubsetConstraintSpec:
    subset: tuple[int, ...]
    delta: float
    mode: SubsetMode = SubsetMode.ALL

    def __post_init__(self):
        object.__setattr__(self, "subset", tuple(sorted(set(int(i) for i in self.subset))))
        object.__setattr__(self, "mode", SubsetMode(self.mode))
        if not self.subset:
            raise ValueError("constraint subset must be nonempty")
        if not 0 < self.delta < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.delta}")


@dataclass
class RuinResult:
    value: float
    method: str
    regime: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


def _clamp(value: float, diagnostics: dict | None = None) -> float:
    if 0.0 <= value <= 1.0:
        return value
    if -_CLAMP < value < 0.0:
        return 0.0
    if 1.0 < value < 1.0 + _CLAMP:
        return 1.0
    msg = f"probability {value:.6g} outside [0, 1] beyond clamp tolerance"
    if diagnostics is not None:
        diagnostics.setdefault("warnings", []).append(msg)
    warnings.warn(msg, NumericalQualityWarning, stacklevel=3)
    return min(max(value, 0.0), 1.0)


# -- exact formula for exponential claims ------------------------------------


def _exact_integral(u, T, lam, theta, r, tol):
    rho = lam / (theta * r)
    sq = math.sqrt(rho)
    a = 2.0 * T * math.sqrt(theta * r * lam)
    b = -(r * theta + lam) * T
    w = u * math.sqrt(theta * lam / r)

    def integrand(mu):
        c = math.cos(mu)
        f1 = rho * math.exp(a * c + b + u * theta * (sq * c - 1.0))
        phase = w * math.sin(mu)
        # cos(x) - cos(x + 2mu) and 1 + rho - 2 sqrt(rho) cos(mu), cancellation-free
        f2 = 2.0 * math.sin(phase + mu) * math.sin(mu)
        f3 = (1.0 - sq) ** 2 + 4.0 * sq * math.sin(0.5 * mu) ** 2
        return f1 * f2 / f3

    # f3(0) = (1 - sqrt(rho))^2 vanishes only at rho == 1; the singularity is removable
    start = 1e-12 if abs(1.0 - sq) < 1e-12 else 0.0
    return integrate(integrand, start, math.pi, QuadratureConfig(tol=tol)) / math.pi


def ruin_exact_exponential(
    u: float,
    T: float,
    lam: float,
    theta: float,
    r: float,
    tol: float = 1e-8,
    rel_tol: float = 1e-6,
) -> float:
    """Finite-horizon ruin probability for exponential(theta) claims.

    Evaluates the closed form as an integral over (0, pi). The quadrature
    runs at absolute tolerance ``tol``; when the result is small enough that
    ``tol`` would leave fewer than ``-log10(rel_tol)`` correct digits it is
    recomputed at ``rel_tol * value`` (floored near machine precision of the
    leading term).
    """
    if u < 0 or not T > 0 or not lam > 0 or not theta > 0:
        raise ValueError(f"need u >= 0, T, lambda, theta > 0; got u={u}, T={T}, lambda={lam}, theta={theta}")
    if not r > 0:
        raise ValueError("exact formula needs a positive premium rate")
    return _exact_cached(float(u), float(T), float(lam), float(theta), float(r), tol, rel_tol)


@lru_cache(maxsize=200_000)
def _exact_cached(u, T, lam, theta, r, tol, rel_tol):
    profitable = theta * r > lam
    lead = lam / (theta * r) * math.exp(-(theta - lam / r) * u) if profitable else 1.0
    value = lead - _exact_integral(u, T, lam, theta, r, tol)
    target = max(rel_tol * abs(value), 1e-15 * lead, 1e-300)
    if target < tol:
        value = lead - _exact_integral(u, T, lam, theta, r, target)
    return _clamp(value)


# -- Arfwedson approximation ------------------------------------------------


def _solve_increasing(g, target, sup, start=0.0):
    """Solve ``g(s) = target`` for increasing ``g`` on ``(-inf, sup)``."""
    hi = sup - 1e-9 if math.isfinite(sup) else max(start, 0.0) + 1.0
    step = 1.0
    while g(hi) < target:
        if math.isfinite(sup):
            raise ArfwedsonError("saddlepoint lies beyond the MGF domain")
        step *= 2.0
        hi += step
        if hi > 1e6:
            raise ArfwedsonError("saddlepoint equation has no solution")
    lo = min(start, hi) - 1.0
    step = 1.0
    while g(lo) > target:
        step *= 2.0
        lo -= step
        if lo < -1e8:
            raise ArfwedsonError("saddlepoint equation has no solution")
    return find_root(lambda s: g(s) - target, lo, hi, _ROOT_TOL)


def ruin_arfwedson(u: float, T: float, line: BusinessLine, state: int) -> RuinResult:
    """Arfwedson's large-``u`` approximation of the ruin probability by ``T``.

    The regime tag is ``"<case>:<branch>"`` where case is ``profit`` (r >
    lambda E[C]), ``loss`` or ``balanced`` and branch is ``before``, ``at`` or
    ``after`` the critical horizon (``u / kappa'(gamma)`` resp. ``u /
    kappa'(0)``).

    Raises:
        ArfwedsonError: u <= 0, or the saddlepoint equations are unsolvable.
    """
    if not u > 0:
        raise ArfwedsonError("Arfwedson's approximation needs u > 0")
    if not T > 0:
        raise ValueError("horizon must be positive")
    lam = line.intensities[state]
    dist = line.claims[state]
    k = lambda s: kappa(line, state, s)  # noqa: E731
    kp = lambda s: kappa_prime(line, state, s)  # noqa: E731
    sup = dist.mgf_sup

    try:
        alpha = _solve_increasing(kp, u / T, sup)
        s_min = _solve_increasing(kp, 0.0, sup)
    except BracketError as exc:
        raise ArfwedsonError(str(exc)) from None
    k_alpha = k(alpha)
    beta = alpha - T / u * k_alpha

    # second solution of kappa(s) = kappa(alpha), left of the minimiser
    lo, step = s_min - 1.0, 1.0
    while k(lo) <= k_alpha:
        step *= 2.0
        lo = s_min - step
        if step > 1e8:
            raise ArfwedsonError("no second solution of kappa(s) = kappa(alpha)")
    if k(s_min) >= k_alpha:
        alpha_t = s_min  # alpha sits at the minimiser up to round-off
    else:
        alpha_t = find_root(lambda s: k(s) - k_alpha, lo, s_min, _ROOT_TOL)

    diag = {"alpha": alpha, "alpha_tilde": alpha_t, "beta": beta, "kappa_alpha": k_alpha}

    def k_tilde():
        denom = alpha * alpha_t * math.sqrt(2.0 * math.pi * T * lam * dist.mgf_d2(alpha))
        if denom == 0:
            raise ArfwedsonError("degenerate saddlepoint (alpha or alpha~ is zero)")
        return -(alpha - alpha_t) / denom

    d = drift(line, state)
    scale = max(line.premium, lam * abs(dist.mean), 1e-300)
    if abs(d) <= 1e-12 * scale:
        kt = k_tilde()
        value, regime = kt * math.exp(-beta * u), "balanced"
        diag["K_tilde"] = kt
    elif d > 0:
        gamma = lundberg_root(line, state)
        kg = kp(gamma)
        K = d / kg
        t_crit = u / kg
        diag.update(gamma=gamma, K=K, t_crit=t_crit)
        if abs(T - t_crit) <= _BOUNDARY_RTOL * t_crit:
            value, regime = 0.5 * K * math.exp(-gamma * u), "profit:at"
        else:
            kt = k_tilde()
            diag["K_tilde"] = kt
            if T < t_crit:
                value, regime = kt * math.exp(-beta * u), "profit:before"
            else:
                value = K * math.exp(-gamma * u) + kt * math.exp(-beta * u)
                regime = "profit:after"
    else:
        t_crit = u / kp(0.0)
        diag["t_crit"] = t_crit
        if abs(T - t_crit) <= _BOUNDARY_RTOL * t_crit:
            value, regime = alpha / (2.0 * alpha_t), "loss:at"
        else:
            kt = k_tilde()
            diag["K_tilde"] = kt
            if T < t_crit:
                value, regime = kt * math.exp(-beta * u), "loss:before"
            else:
                value, regime = alpha / alpha_t + kt * math.exp(-beta * u), "loss:after"
    diag["raw"] = value
    return RuinResult(_clamp(value, diag), Method.ARFWEDSON.value, regime, diag)


# -- dispatch -----------------------------------------------------------------


def ruin_prob(
    line: BusinessLine,
    state: int,
    u: float,
    T: float,
    method: Method | str = Method.AUTO,
    *,
    n_paths: int = 100_000,
    seed: int = 0,
    workers: int = 1,
) -> RuinResult:
    """Ruin probability of one line in one state by the chosen method.

    ``auto`` uses the exact formula for exponential claims and Arfwedson's
    approximation otherwise.
    """
    method = Method(method)
    dist = line.claims[state]
    if method is Method.AUTO:
        method = Method.EXACT if isinstance(dist, ExponentialClaims) else Method.ARFWEDSON
    if method is Method.EXACT:
        if not isinstance(dist, ExponentialClaims):
            raise ValueError("exact formula only available for exponential claims")
        lam = line.intensities[state]
        value = ruin_exact_exponential(u, T, lam, dist.rate, line.premium)
        return RuinResult(value, Method.EXACT.value, "profit" if dist.rate * line.premium > lam else "loss")
    if method is Method.ARFWEDSON:
        return ruin_arfwedson(u, T, line, state)
    from .simulate import single_line_ruin

    est = single_line_ruin(line, state, u, T, n_paths=n_paths, seed=seed, workers=workers)
    return RuinResult(est.estimate, Method.MONTE_CARLO.value, None, {"stderr": est.stderr, "n_paths": n_paths})


def ruin_matrix(
    model: ModelSpec,
    u: Sequence[float],
    T: float,
    method: Method | str = Method.AUTO,
    lines: Sequence[int] | None = None,
    states: Sequence[int] | None = None,
) -> np.ndarray:
    """``phi[i, j]`` for the requested lines and states (others left NaN)."""
    n, J = model.n_lines, model.n_states
    out = np.full((n, J), np.nan)
    for i in range(n) if lines is None else lines:
        for j in range(J) if states is None else states:
            out[i, j] = ruin_prob(model.lines[i], j, float(u[i]), T, method).value
    return out


def subset_prob_from_matrix(phi: np.ndarray, weights, subset, mode: SubsetMode | str) -> float:
    """Mixture probability for ALL/ANY modes given ``phi[i, j]``.

    ALL: ``sum_j p_j prod_i phi_ij``; ANY: ``1 - sum_j p_j prod_i (1 - phi_ij)``.
    Both are accumulated in log space so tiny probabilities survive.
    """
    mode = SubsetMode(mode)
    w = np.asarray(weights, dtype=float)
    idx = list(subset)
    used = w > 0
    rows = phi[idx][:, used]
    with np.errstate(divide="ignore"):
        if mode is SubsetMode.ALL:
            logs = np.log(rows).sum(axis=0)
            return float(np.dot(w[used], np.exp(logs)))
        if mode is SubsetMode.ANY:
            logs = np.log1p(-rows).sum(axis=0)
            return float(np.dot(w[used], -np.expm1(logs)))
    raise ValueError("aggregate ruin has no closed form; use subset_prob")


def subset_prob(
    model: ModelSpec,
    weights,
    constraint: SubsetConstraintSpec,
    u: Sequence[float],
    T: float,
    method: Method | str = Method.AUTO,
    *,
    n_paths: int = 20_000,
    seed: int = 0,
) -> float:
    """Probability of the constraint's ruin event under the state mixture ``weights``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("reserves must be non-negative")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be a probability vector, got {w}")
    if constraint.mode is SubsetMode.AGGREGATE:
        from .simulate import monte_carlo_ruin

        return monte_carlo_ruin(
            model, u, T, weights=w, subset=constraint.subset, event="aggregate",
            n_paths=n_paths, seed=seed,
        ).estimate
    states = [j for j in range(model.n_states) if w[j] > 0]
    phi = ruin_matrix(model, u, T, method, lines=constraint.subset, states=states)
    return subset_prob_from_matrix(phi, w, constraint.subset, constraint.mode)
