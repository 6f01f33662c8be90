"""Numerical kernels: adaptive Simpson quadrature, bisection, Nelder-Mead.

All three are deterministic and pure Python/numpy; they are shared by the
ruin, calibration and allocation code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_EPS = float(np.finfo(float).eps)


class IntegrationError(RuntimeError):
    """Adaptive quadrature hit its depth limit before meeting the tolerance."""

    def __init__(self, message: str, interval: tuple[float, float], error: float):
        super().__init__(message)
        self.interval = interval
        self.error = error


class BracketError(ValueError):
    """The function does not change sign over the supplied bracket."""


@dataclass(frozen=True)
class QuadratureConfig:
    tol: float = 1e-8
    max_depth: int = 50
    # panels are never accepted above this depth; guards against a lucky
    # agreement of the coarse estimates on oscillating integrands
    min_depth: int = 4

    def __post_init__(self):
        if not self.tol > 0 or self.max_depth < 1 or not 0 <= self.min_depth <= self.max_depth:
            raise ValueError("quadrature needs tol > 0 and 0 <= min_depth <= max_depth, max_depth >= 1")


@dataclass(frozen=True)
class SimplexConfig:
    """Nelder-Mead settings.

    ``step`` is the initial simplex size as a fraction of the box width for
    doubly bounded coordinates, otherwise a fraction of ``max(1, |x0|)``.
    """

    step: float = 0.1
    ftol: float = 1e-8
    max_iter: int = 5000
    restarts: int = 3

    def __post_init__(self):
        if not (self.step > 0 and self.ftol > 0 and self.max_iter > 0 and self.restarts >= 0):
            raise ValueError("simplex settings must be positive")


def integrate(
    f: Callable[[float], float],
    a: float,
    b: float,
    cfg: QuadratureConfig | None = None,
) -> float:
    """Adaptive Simpson quadrature of ``f`` over ``[a, b]``.

    Each panel is accepted once the two-halves estimate differs from the
    whole-panel estimate by at most ``15 * tol_panel``; the accepted value
    carries the Richardson correction. Tolerance is split evenly between
    halves on subdivision.

    Raises:
        IntegrationError: a panel needs more than ``cfg.max_depth`` halvings.
            The error reports the worst such panel.
    """
    cfg = cfg or QuadratureConfig()
    if a == b:
        return 0.0
    if a > b:
        raise ValueError(f"integrate needs a <= b, got [{a}, {b}]")

    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    # differences below ~eps * max|f| per unit length are round-off, not
    # truncation error; without this floor tiny tolerances never terminate
    fmax = max(abs(fa), abs(fm), abs(fb))
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    total = 0.0
    compensation = 0.0
    worst: tuple[float, tuple[float, float]] | None = None
    stack = [(a, b, fa, fm, fb, whole, cfg.tol, 0)]
    while stack:
        lo, hi, flo, fmid, fhi, s, tol, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        fl = f(0.5 * (lo + mid))
        fr = f(0.5 * (mid + hi))
        left = (mid - lo) / 6.0 * (flo + 4.0 * fl + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * fr + fhi)
        delta = left + right - s
        fmax = max(fmax, abs(fl), abs(fr))
        floor = 64.0 * _EPS * fmax * (hi - lo)
        if (depth >= cfg.min_depth and abs(delta) <= max(15.0 * tol, floor)) or hi - lo <= 4 * math.ulp(max(abs(lo), abs(hi))):
            # Kahan summation; many tiny panels
            y = left + right + delta / 15.0 - compensation
            t = total + y
            compensation = (t - total) - y
            total = t
            continue
        if depth + 1 > cfg.max_depth:
            err = abs(delta) / 15.0
            if worst is None or err > worst[0]:
                worst = (err, (lo, hi))
            total += left + right + delta / 15.0
            continue
        stack.append((mid, hi, fmid, fr, fhi, right, 0.5 * tol, depth + 1))
        stack.append((lo, mid, flo, fl, fmid, left, 0.5 * tol, depth + 1))
    if worst is not None:
        raise IntegrationError(
            f"max depth {cfg.max_depth} exceeded; worst panel [{worst[1][0]:.6g}, "
            f"{worst[1][1]:.6g}] with error estimate {worst[0]:.3g}",
            worst[1],
            worst[0],
        )
    return total


def _refine_bracket(f, lo, hi, flo, levels=6):
    """Look for an exact zero or a sign change on a dyadic grid of the bracket."""
    n = 1 << levels
    xs = [lo + (hi - lo) * k / n for k in range(1, n)]
    prev_x, prev_f = lo, flo
    for x in xs:
        fx = f(x)
        if fx == 0:
            return x, x, fx
        if (fx < 0) != (prev_f < 0):
            return prev_x, x, prev_f
        prev_x, prev_f = x, fx
    return None


def find_root(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> float:
    """Bisection on a sign-changing bracket; returns the bracket midpoint.

    A zero at either end (``f(lo) * f(hi) == 0``) is accepted as a bracket.
    When the ends share a sign, a 64-point dyadic grid is searched for a zero
    or an inner sign change (this catches tangent roots such as ``x**2`` on a
    symmetric bracket) before giving up.
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if math.isnan(flo) or math.isnan(fhi):
        raise BracketError(f"f is NaN at the bracket [{lo}, {hi}]")
    if flo * fhi > 0:
        inner = _refine_bracket(f, lo, hi, flo)
        if inner is None:
            raise BracketError(f"no sign change on [{lo}, {hi}]: f={flo}, {fhi}")
        lo, hi, flo = inner
        if lo == hi:
            return lo
    for _ in range(400):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    return 0.5 * (lo + hi)


# -- Nelder-Mead with box transformation ------------------------------------


class _Box:
    """Bijection between unconstrained ``y`` and the box ``[lower, upper]``.

    Doubly bounded coordinates use ``lo + (hi - lo) (1 + sin y) / 2``,
    one-sided ones ``lo - 1 + sqrt(1 + y^2)`` (mirrored for upper bounds).
    """

    def __init__(self, lower: np.ndarray, upper: np.ndarray):
        self.lower, self.upper = lower, upper
        self.lo_only = np.isfinite(lower) & ~np.isfinite(upper)
        self.hi_only = ~np.isfinite(lower) & np.isfinite(upper)
        self.both = np.isfinite(lower) & np.isfinite(upper)

    def to_x(self, y: np.ndarray) -> np.ndarray:
        x = y.copy()
        lo, hi = self.lower, self.upper
        m = self.both
        x[m] = lo[m] + (hi[m] - lo[m]) * 0.5 * (1.0 + np.sin(y[m]))
        m = self.lo_only
        x[m] = lo[m] - 1.0 + np.sqrt(1.0 + y[m] ** 2)
        m = self.hi_only
        x[m] = hi[m] + 1.0 - np.sqrt(1.0 + y[m] ** 2)
        return np.clip(x, lo, hi)

    def to_y(self, x: np.ndarray) -> np.ndarray:
        y = x.astype(float).copy()
        lo, hi = self.lower, self.upper
        m = self.both
        if m.any():
            width = np.where(hi[m] > lo[m], hi[m] - lo[m], 1.0)
            y[m] = np.arcsin(np.clip(2.0 * (x[m] - lo[m]) / width - 1.0, -1.0, 1.0))
        m = self.lo_only
        y[m] = np.sqrt(np.maximum((x[m] - lo[m] + 1.0) ** 2 - 1.0, 0.0))
        m = self.hi_only
        y[m] = np.sqrt(np.maximum((hi[m] - x[m] + 1.0) ** 2 - 1.0, 0.0))
        return y


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    restarts: int
    converged: bool
    warnings: list[str] = field(default_factory=list)


def _initial_simplex(x0: np.ndarray, box: _Box, step: float) -> np.ndarray:
    n = x0.size
    lo, hi = box.lower, box.upper
    pts = [x0.copy()]
    for i in range(n):
        x = x0.copy()
        if box.both[i]:
            h = step * (hi[i] - lo[i])
        else:
            h = step * max(1.0, abs(x0[i]))
        if x[i] + h > hi[i]:
            h = -h
        x[i] += h
        x[i] = min(max(x[i], lo[i]), hi[i])
        pts.append(x)
    return np.array(pts)


def _nelder_mead(fy, simplex_y, ftol, max_iter):
    """Standard NM (reflect 1, expand 2, contract 0.5, shrink 0.5) in y-space."""
    n = simplex_y.shape[1]
    fs = np.array([fy(p) for p in simplex_y])
    evals = len(fs)
    it = 0
    converged = False
    while it < max_iter:
        order = np.argsort(fs, kind="stable")
        simplex_y, fs = simplex_y[order], fs[order]
        if fs[-1] - fs[0] <= ftol:
            converged = True
            break
        it += 1
        centroid = simplex_y[:-1].mean(axis=0)
        worst = simplex_y[-1]
        xr = centroid + (centroid - worst)
        fr = fy(xr)
        evals += 1
        if fs[0] <= fr < fs[-2]:
            simplex_y[-1], fs[-1] = xr, fr
            continue
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = fy(xe)
            evals += 1
            if fe < fr:
                simplex_y[-1], fs[-1] = xe, fe
            else:
                simplex_y[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + 0.5 * (xr - centroid)
        else:
            xc = centroid + 0.5 * (worst - centroid)
        fc = fy(xc)
        evals += 1
        if fc < min(fr, fs[-1]):
            simplex_y[-1], fs[-1] = xc, fc
            continue
        best = simplex_y[0]
        for k in range(1, n + 1):
            simplex_y[k] = best + 0.5 * (simplex_y[k] - best)
            fs[k] = fy(simplex_y[k])
        evals += n
    order = np.argsort(fs, kind="stable")
    return simplex_y[order], fs[order], it, evals, converged


def minimize(
    f: Callable[[np.ndarray], float],
    x0,
    lower=None,
    upper=None,
    cfg: SimplexConfig | None = None,
) -> MinimizeResult:
    """Minimize ``f`` over a box with Nelder-Mead on transformed coordinates.

    After each convergence the simplex is rebuilt around the incumbent and
    the search rerun, ``cfg.restarts`` times; the best point seen is kept.
    Hitting ``max_iter`` is reported in ``warnings`` rather than raised.
    """
    cfg = cfg or SimplexConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    lower = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,)).copy()
    upper = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,)).copy()
    if np.any(x0 < lower) or np.any(x0 > upper):
        raise ValueError(f"x0 {x0} outside the box [{lower}, {upper}]")
    box = _Box(lower, upper)

    def fy(y):
        return float(f(box.to_x(y)))

    best_x = x0.copy()
    best_f = float(f(x0))
    total_it = total_ev = 0
    warnings: list[str] = []
    converged = False
    restarts = 0
    for attempt in range(cfg.restarts + 1):
        simplex_x = _initial_simplex(best_x, box, cfg.step)
        simplex_y = np.array([box.to_y(p) for p in simplex_x])
        budget = cfg.max_iter - total_it
        if budget <= 0:
            break
        simplex_y, fs, it, ev, converged = _nelder_mead(fy, simplex_y, cfg.ftol, budget)
        total_it += it
        total_ev += ev
        restarts = attempt
        improved = fs[0] < best_f
        if fs[0] <= best_f:
            best_x, best_f = box.to_x(simplex_y[0]), float(fs[0])
        if attempt > 0 and not improved and converged:
            break
    if not converged:
        warnings.append(f"maximum iterations ({cfg.max_iter}) reached")
    return MinimizeResult(best_x, best_f, total_it, total_ev, restarts, converged, warnings)
