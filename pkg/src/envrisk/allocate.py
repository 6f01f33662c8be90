"""Minimal total reserves subject to subset ruin-probability caps.

The problem ``min sum(u) s.t. pi_m(u, T) <= delta_m, u >= 0`` is solved with
a quadratic penalty on the relative constraint ``c_m = pi_m / delta_m - 1``,
shifted by multiplier estimates (augmented Lagrangian), each subproblem
minimised by box-constrained Nelder-Mead. The penalty weight grows tenfold
whenever the violation fails to shrink fourfold. A plain escalating penalty
leaves the simplex in a valley too narrow to traverse; the multiplier shift
reaches feasibility at moderate weights. Any residual violation is removed by
scaling ``u`` up by the smallest feasible factor.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .calibrate import Mode, PosteriorState, update
from .model import ModelSpec
from .numerics import SimplexConfig, find_root, minimize
from .ruin import (
    Method,
    SubsetConstraintSpec,
    SubsetMode,
    ruin_prob,
    subset_prob,
    subset_prob_from_matrix,
)
from .simulate import ObservationBatch, PeriodGrid

ACTIVE_RTOL = 1e-4
FEASIBLE_RTOL = 1e-6
PENALTY_START = 1e2
PENALTY_CAP = 1e8
MAX_ROUNDS = 40


class InfeasibleAllocationError(RuntimeError):
    def __init__(self, message: str, worst: SubsetConstraintSpec | None = None, value: float | None = None):
        super().__init__(message)
        self.worst = worst
        self.value = value


@dataclass(frozen=True)
class AllocationProblem:
    model: ModelSpec
    weights: tuple[float, ...]
    horizon: float
    constraints: tuple[SubsetConstraintSpec, ...]
    start: tuple[float, ...] | None = None
    simplex: SimplexConfig = field(default_factory=SimplexConfig)
    method: Method = Method.AUTO
    mc_paths: int = 20_000
    seed: int = 0
    upper: tuple[float, ...] | None = None  # optional per-line reserve cap

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(x) for x in self.weights))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "method", Method(self.method))
        if not self.constraints:
            raise ValueError("allocation needs at least one constraint")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if len(self.weights) != self.model.n_states:
            raise ValueError("one weight per environmental state")
        for c in self.constraints:
            if max(c.subset) >= self.model.n_lines:
                raise ValueError(f"constraint subset {c.subset} refers to a missing line")
        if self.upper is not None:
            up = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.model.n_lines,))
            if not np.all(up > 0):
                raise ValueError("reserve caps must be positive")
            object.__setattr__(self, "upper", tuple(float(x) for x in up))

    def with_weights(self, weights) -> AllocationProblem:
        return replace(self, weights=tuple(float(x) for x in weights))


@dataclass
class AllocationResult:
    u: np.ndarray
    objective: float
    probabilities: np.ndarray
    slacks: np.ndarray
    active: list[int]
    diagnostics: dict = field(default_factory=dict)


def subset_family(n_lines: int, kind: str = "all") -> list[tuple[int, ...]]:
    """``singletons``, ``full+singletons`` or ``all`` nonempty subsets."""
    singles = [(i,) for i in range(n_lines)]
    if kind == "singletons":
        return singles
    if kind == "full+singletons":
        full = tuple(range(n_lines))
        return singles + ([full] if n_lines > 1 else [])
    if kind == "all":
        return [c for k in range(1, n_lines + 1) for c in itertools.combinations(range(n_lines), k)]
    raise ValueError(f"unknown subset family {kind!r}")


def power_constraints(
    subsets: Iterable[Sequence[int]], mode: SubsetMode | str = SubsetMode.ALL, base: float = 0.001
) -> tuple[SubsetConstraintSpec, ...]:
    """Constraints with ``delta = base ** |S|``."""
    return tuple(SubsetConstraintSpec(tuple(s), base ** len(tuple(s)), mode) for s in subsets)


def problem_from_dict(d: dict, model: ModelSpec | None = None) -> AllocationProblem:
    """Allocation problem from a model configuration extended with ``T`` and constraints.

    Constraints are either listed, ``[{"subset": [0, 1], "mode": "all",
    "delta": 1e-6}, ...]`` (``"base"`` instead of ``"delta"`` means
    ``base ** |subset|``), or generated with ``"family"`` (``singletons``,
    ``full+singletons``, ``all``) plus top-level ``"mode"`` and ``"base"``.
    Line indices are 0-based.
    """
    from .model import model_from_dict

    model = model or model_from_dict(d)
    if "T" not in d:
        raise ValueError("allocation config needs a horizon 'T'")
    if "constraints" in d:
        cons = []
        for c in d["constraints"]:
            subset = tuple(int(i) for i in c["subset"])
            if "delta" in c:
                delta = float(c["delta"])
            elif "base" in c:
                delta = float(c["base"]) ** len(subset)
            else:
                raise ValueError(f"constraint {c} needs 'delta' or 'base'")
            cons.append(SubsetConstraintSpec(subset, delta, c.get("mode", "all")))
    else:
        fam = subset_family(model.n_lines, d.get("family", "all"))
        cons = power_constraints(fam, d.get("mode", "all"), float(d.get("base", 0.001)))
    opt = d.get("optimizer", {})
    simplex = SimplexConfig(**{k: opt[k] for k in ("step", "ftol", "max_iter", "restarts") if k in opt})
    weights = d.get("weights", model.environment.probabilities)
    upper = d.get("upper")
    return AllocationProblem(
        model,
        tuple(weights),
        float(d["T"]),
        tuple(cons),
        start=tuple(d["start"]) if "start" in d else None,
        simplex=simplex,
        method=d.get("method", "auto"),
        mc_paths=int(d.get("mc_paths", 20_000)),
        seed=int(d.get("seed", 0)),
        upper=None if upper is None else tuple(np.atleast_1d(np.asarray(upper, dtype=float))),
    )


def result_to_dict(result: AllocationResult, problem: AllocationProblem) -> dict:
    return {
        "u": result.u.tolist(),
        "objective": result.objective,
        "constraints": [
            {"subset": list(c.subset), "mode": c.mode.value, "delta": c.delta, "probability": float(p), "slack": float(s)}
            for c, p, s in zip(problem.constraints, result.probabilities, result.slacks)
        ],
        "active": result.active,
        "diagnostics": result.diagnostics,
    }


class _Evaluator:
    """Evaluates every constraint probability, sharing the ``phi`` matrix."""

    def __init__(self, problem: AllocationProblem):
        self.problem = problem
        w = np.asarray(problem.weights)
        self.weights = w
        self.states = [j for j in range(problem.model.n_states) if w[j] > 0]
        self.lines = sorted({i for c in problem.constraints if c.mode is not SubsetMode.AGGREGATE for i in c.subset})
        self.calls = 0

    def phi(self, u) -> np.ndarray:
        p = self.problem
        out = np.full((p.model.n_lines, p.model.n_states), np.nan)
        for i in self.lines:
            for j in self.states:
                out[i, j] = ruin_prob(p.model.lines[i], j, float(u[i]), p.horizon, p.method).value
        return out

    def __call__(self, u) -> np.ndarray:
        self.calls += 1
        p = self.problem
        phi = self.phi(u) if self.lines else None
        vals = np.empty(len(p.constraints))
        for k, c in enumerate(p.constraints):
            if c.mode is SubsetMode.AGGREGATE:
                vals[k] = subset_prob(p.model, self.weights, c, u, p.horizon, n_paths=p.mc_paths, seed=p.seed)
            else:
                vals[k] = subset_prob_from_matrix(phi, self.weights, c.subset, c.mode)
        return vals


def _mixture_phi(problem: AllocationProblem, line: int, u: float) -> float:
    w = problem.weights
    return sum(
        w[j] * ruin_prob(problem.model.lines[line], j, u, problem.horizon, problem.method).value
        for j in range(problem.model.n_states)
        if w[j] > 0
    )


def _single_line_reserve(problem: AllocationProblem, line: int, delta: float) -> float | None:
    """Smallest ``u`` with mixture ruin probability of ``line`` at most ``delta``."""
    g = lambda x: _mixture_phi(problem, line, x) - delta  # noqa: E731
    if g(0.0) <= 0:
        return 0.0
    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            return None
    return find_root(g, hi / 2 if hi > 1 else 0.0, hi, 1e-10)


def _line_share(c: SubsetConstraintSpec) -> float:
    k = len(c.subset)
    return c.delta / k if c.mode is SubsetMode.ANY else c.delta ** (1.0 / k)


def starting_point(problem: AllocationProblem) -> np.ndarray:
    """Per line, the reserve meeting its smallest share of any constraint.

    A line's share is ``delta / |S|`` under ANY and ``delta^(1/|S|)`` under
    ALL, so the start roughly satisfies every subset constraint at once.
    """
    if problem.start is not None:
        return np.asarray(problem.start, dtype=float)
    n = problem.model.n_lines
    u0 = np.empty(n)
    for i in range(n):
        shares = [
            _line_share(c) for c in problem.constraints if i in c.subset and c.mode is not SubsetMode.AGGREGATE
        ]
        u = None
        if shares:
            try:
                u = _single_line_reserve(problem, i, min(shares))
            except ValueError:
                u = None
        if u is None:
            u = 10.0 * problem.model.lines[i].premium * problem.horizon
        u0[i] = u
    return u0


def _violation(vals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    return np.maximum(vals / deltas - 1.0, 0.0)


def _restore(evaluate, u: np.ndarray, deltas: np.ndarray, upper=None) -> tuple[np.ndarray, float]:
    """Scale ``u`` by the least factor in ``[1, 1.05^k]`` that is feasible."""
    cap = np.inf if upper is None else np.asarray(upper)
    feasible = lambda s: bool(np.all(evaluate(np.minimum(u * s, cap)) <= deltas))  # noqa: E731
    if feasible(1.0):
        return u, 1.0
    hi = 1.05
    while not feasible(hi):
        hi *= 1.05
        if hi > 1e3:
            return np.minimum(u * hi, cap), hi
    lo = hi / 1.05
    while hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return np.minimum(u * hi, cap), hi


def _infeasible(problem: AllocationProblem, vals: np.ndarray, deltas: np.ndarray, where: str):
    k = int(np.argmax(vals / deltas))
    c = problem.constraints[k]
    return InfeasibleAllocationError(
        f"constraint {k} (subset {c.subset}, {c.mode.value}) infeasible{where}: "
        f"probability {vals[k]:.6g} > delta {c.delta:.6g}",
        c,
        float(vals[k]),
    )


def solve(problem: AllocationProblem) -> AllocationResult:
    """Minimise total reserves under the problem's constraints.

    Raises:
        InfeasibleAllocationError: no feasible point was found after penalty
            escalation and restoration; reports the worst constraint.
    """
    evaluate = _Evaluator(problem)
    deltas = np.array([c.delta for c in problem.constraints])
    upper = None if problem.upper is None else np.array(problem.upper)
    if upper is not None:
        at_cap = evaluate(upper)
        if np.any(at_cap > deltas * (1 + FEASIBLE_RTOL)):
            raise _infeasible(problem, at_cap, deltas, " even at the reserve caps")
    u = starting_point(problem)
    if upper is not None:
        u = np.minimum(u, upper)
    n = u.size
    lower = np.zeros(n)
    rho = PENALTY_START
    lam = np.zeros(len(deltas))
    history = []
    total_iter = total_restarts = 0
    prev_viol = np.inf
    for round_ in range(MAX_ROUNDS):

        def objective(x, rho=rho, lam=lam):
            c = evaluate(x) / deltas - 1.0
            shifted = np.maximum(lam + rho * c, 0.0)
            return float(x.sum() + (np.dot(shifted, shifted) - np.dot(lam, lam)) / (2.0 * rho))

        res = minimize(objective, u, lower, upper, problem.simplex)
        step = float(np.max(np.abs(res.x - u)))
        u = res.x
        total_iter += res.iterations
        total_restarts += res.restarts
        c = evaluate(u) / deltas - 1.0
        viol = float(np.maximum(c, 0.0).max())
        lam = np.maximum(lam + rho * c, 0.0)
        history.append({"rho": rho, "objective": res.fun, "max_rel_violation": viol, "step": step})
        if viol <= FEASIBLE_RTOL and step <= 1e-7 * max(1.0, float(np.abs(u).max())):
            break
        if viol > 0.25 * prev_viol and rho < PENALTY_CAP:
            rho *= 10.0
        prev_viol = viol
    u_raw = u.copy()
    u, scale = _restore(evaluate, u, deltas, upper)
    vals = evaluate(u)
    slacks = deltas - vals
    if np.any(vals > deltas * (1 + FEASIBLE_RTOL)):
        raise _infeasible(problem, vals, deltas, "")
    active = [k for k in range(len(deltas)) if slacks[k] < ACTIVE_RTOL * deltas[k]]
    diagnostics = {
        "iterations": total_iter,
        "restarts": total_restarts,
        "penalty_rounds": history,
        "penalty_residual": history[-1]["max_rel_violation"],
        "multipliers": (lam / deltas).tolist(),
        "restoration_scale": scale,
        "unrestored_u": u_raw.tolist(),
        "evaluations": evaluate.calls,
    }
    return AllocationResult(u, float(u.sum()), vals, slacks, active, diagnostics)


# -- KKT diagnostics ----------------------------------------------------------------


@dataclass
class KKTReport:
    active: list[int]
    gradients: np.ndarray  # (n_active, n_lines)
    multipliers: np.ndarray
    residual: float
    nonnegative: bool
    is_kkt: bool
    message: str


def kkt_report(problem: AllocationProblem, u, residual_tol: float = 1e-3) -> KKTReport:
    """Least-squares multipliers for ``1 + sum_m mu_m grad pi_m = 0`` at ``u``.

    Gradients of active constraints use central differences with step
    ``1e-4 * max(1, u_i)``. Coordinates at the bound ``u_i = 0`` get a free
    non-negative bound multiplier and are left out of the stationarity
    system.
    """
    u = np.asarray(u, dtype=float)
    evaluate = _Evaluator(problem)
    deltas = np.array([c.delta for c in problem.constraints])
    vals = evaluate(u)
    active = [k for k in range(len(deltas)) if deltas[k] - vals[k] < ACTIVE_RTOL * deltas[k]]
    n = u.size
    if not active:
        return KKTReport([], np.zeros((0, n)), np.zeros(0), math.sqrt(n), True, False,
                         "no active constraints: descent direction exists, not a KKT point")
    grads = np.zeros((len(active), n))
    for i in range(n):
        h = 1e-4 * max(1.0, u[i])
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] = max(u[i] - h, 0.0)
        fu, fd = evaluate(up), evaluate(dn)
        grads[:, i] = (fu[active] - fd[active]) / (up[i] - dn[i])
    interior = u > 0
    # scale rows by delta so multipliers of tiny constraints stay well conditioned
    scale = deltas[active]
    A = (grads / scale[:, None])[:, interior].T
    b = -np.ones(int(interior.sum()))
    mu_scaled, *_ = np.linalg.lstsq(A, b, rcond=None)
    mu = mu_scaled / scale
    resid_vec = np.ones(n) + grads.T @ mu
    resid_vec[~interior] = np.minimum(resid_vec[~interior], 0.0)  # bound multiplier absorbs >= 0 part
    residual = float(np.linalg.norm(resid_vec))
    nonneg = bool(np.all(mu >= -1e-12 * np.abs(mu).max()))
    ok = nonneg and residual < residual_tol
    msg = "KKT conditions satisfied" if ok else ("negative multiplier" if not nonneg else "stationarity residual too large")
    return KKTReport(active, grads, mu, residual, nonneg, ok, msg)


# -- adaptive reserve cycle -----------------------------------------------------------


def reserve_update_cycle(
    model: ModelSpec,
    grid: PeriodGrid,
    batches: Sequence[ObservationBatch],
    template: AllocationProblem,
    mode: Mode | str = Mode.BAYES,
    weight: float = 1.0,
    prior=None,
    every: int = 1,
) -> list[tuple[PosteriorState, AllocationResult]]:
    """Update the posterior each period and re-solve the allocation with it.

    Allocations are recomputed every ``every`` periods (and at the last one),
    warm-started from the previous solution.
    """
    post = PosteriorState.prior(model.n_states, mode, weight, prior)
    lengths = grid.lengths
    out = []
    start = template.start
    for k, obs in enumerate(batches):
        post = update(post, model, obs, float(lengths[k]))
        if (k + 1) % every and k + 1 != len(batches):
            continue
        problem = replace(template.with_weights(post.probabilities), start=start)
        result = solve(problem)
        start = tuple(result.u)
        out.append((post, result))
    return out
