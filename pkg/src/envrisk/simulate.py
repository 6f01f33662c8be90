"""Exact event-driven simulation of the multi-line surplus processes.

Ruin can only happen at claim instants (the surplus rises linearly in
between), so paths are simulated claim by claim with no time stepping.

Random streams: every simulation is keyed by a master seed (an int or a
tuple of ints). Paths are generated in fixed-size blocks; block ``b`` draws
from ``Philox(SeedSequence(seed, spawn_key=(tag, b, k)))`` where ``k = 0``
is the environment stream and ``k = i + 1`` the stream of line ``i``.
Results therefore do not depend on how blocks are spread over workers.
Philox is numpy's counter-based bit generator; streams are stable for a
given numpy release (tested with numpy 2.2).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import (
    BusinessLine,
    EnvironmentSpec,
    Fixed,
    ModelSpec,
    Resampled,
    SwitchAt,
)

BLOCK_SIZE = 1 << 15

_TAG_PATHS = 1
_TAG_OBS = 2


def _seed_entropy(seed) -> int | list[int]:
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return int(seed)


def make_rng(seed, *key: int) -> np.random.Generator:
    """Philox generator for the substream ``key`` of master ``seed``."""
    ss = np.random.SeedSequence(_seed_entropy(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PeriodGrid:
    """Observation period boundaries ``0 = t_0 < t_1 < ... < t_M``."""

    boundaries: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 1 or b[0] != 0.0:
            raise ValueError("grid must start at 0")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("grid boundaries must be strictly increasing")

    @classmethod
    def uniform(cls, n_periods: int, length: float = 1.0) -> PeriodGrid:
        return cls(tuple(length * m for m in range(n_periods + 1)))

    @property
    def n_periods(self) -> int:
        return len(self.boundaries) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def covering(self, T: float) -> PeriodGrid:
        """Grid restricted (or extended by its last length) to end exactly at ``T``."""
        b = [x for x in self.boundaries if x < T]
        step = self.lengths[-1] if self.n_periods else 1.0
        while b[-1] + step < T:
            b.append(b[-1] + step)
        return PeriodGrid(tuple(b) + (float(T),))


@dataclass(frozen=True)
class ObservationBatch:
    """Claims observed in period ``period`` (1-based): counts and sizes per line."""

    period: int
    counts: tuple[int, ...]
    sizes: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.counts) != len(self.sizes):
            raise ValueError("one count and one size list per line")
        for y, z in zip(self.counts, self.sizes):
            if y < 0 or len(z) != y:
                raise ValueError(f"count {y} does not match {len(z)} claim sizes")


@dataclass
class PathResult:
    ruined: np.ndarray  # bool per line
    ruin_time: np.ndarray  # nan where not ruined
    terminal: np.ndarray  # surplus at T
    states: np.ndarray  # environment state per period


@dataclass
class PathBatch:
    ruined: np.ndarray  # (n_paths, n_lines) bool
    ruin_time: np.ndarray  # (n_paths, n_lines)
    terminal: np.ndarray  # (n_paths, n_lines)
    states: np.ndarray  # (n_paths, n_periods)
    aggregate_ruined: np.ndarray | None = None  # (n_paths,) for the summed subset


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    n_paths: int


# -- environment ---------------------------------------------------------------


def realize_states(env: EnvironmentSpec, n_periods: int, rng: np.random.Generator, n_paths: int = 1) -> np.ndarray:
    """State of every path in every period, shape ``(n_paths, n_periods)``."""
    d = env.dynamics
    if isinstance(d, Fixed):
        return np.full((n_paths, n_periods), d.state, dtype=np.int64)
    if isinstance(d, SwitchAt):
        periods = np.arange(1, n_periods + 1)
        row = np.where(periods <= d.after_period, d.source, d.target)
        return np.tile(row, (n_paths, 1)).astype(np.int64)
    if isinstance(d, Resampled):
        p = np.asarray(env.probabilities)
        return rng.choice(len(p), size=(n_paths, n_periods), p=p).astype(np.int64)
    raise TypeError(f"unknown dynamics {d!r}")


# -- path engine -----------------------------------------------------------------


def _line_claims(line: BusinessLine, bounds: np.ndarray, states: np.ndarray, rng: np.random.Generator):
    """Claim (path, time, size) triples for one line, sorted by path then time."""
    lam = np.asarray(line.intensities)
    n_paths = states.shape[0]
    paths, times, sizes = [], [], []
    for m in range(len(bounds) - 1):
        a, b = bounds[m], bounds[m + 1]
        st = states[:, m]
        counts = rng.poisson(lam[st] * (b - a))
        idx = np.repeat(np.arange(n_paths), counts)
        t = a + (b - a) * rng.random(idx.size)
        z = np.empty(idx.size)
        cst = st[idx]
        for j, dist in enumerate(line.claims):
            mask = cst == j
            k = int(mask.sum())
            if k:
                z[mask] = dist.sample(rng, k)
        paths.append(idx)
        times.append(t)
        sizes.append(z)
    return np.concatenate(paths), np.concatenate(times), np.concatenate(sizes)


def _first_ruin(paths, times, sizes, u, r, n_paths):
    """Ruin flag and first ruin time per path for claims sorted by (path, time)."""
    order = np.lexsort((times, paths))
    paths, times, sizes = paths[order], times[order], sizes[order]
    cum = np.cumsum(sizes)
    starts = np.searchsorted(paths, np.arange(n_paths))
    base = np.concatenate(([0.0], cum))[starts]
    level = u[paths] + r[paths] * times - (cum - base[paths])
    neg = np.flatnonzero(level < 0)
    ruined = np.zeros(n_paths, dtype=bool)
    ruin_time = np.full(n_paths, np.nan)
    if neg.size:
        first_paths, first_idx = np.unique(paths[neg], return_index=True)
        ruined[first_paths] = True
        ruin_time[first_paths] = times[neg[first_idx]]
    return ruined, ruin_time


def _simulate_block(model, u, T, bounds, seed, tag, block, n_block, states_override, aggregate):
    env_rng = make_rng(seed, tag, block, 0)
    if states_override is None:
        states = realize_states(model.environment, len(bounds) - 1, env_rng, n_block)
    else:
        states = np.broadcast_to(states_override, (n_block, len(bounds) - 1)).astype(np.int64)
    n = model.n_lines
    ruined = np.zeros((n_block, n), dtype=bool)
    ruin_time = np.full((n_block, n), np.nan)
    terminal = np.empty((n_block, n))
    claims = {}
    for i, line in enumerate(model.lines):
        rng = make_rng(seed, tag, block, i + 1)
        p, t, z = _line_claims(line, bounds, states, rng)
        claims[i] = (p, t, z)
        ui = np.full(n_block, u[i])
        ri = np.full(n_block, line.premium)
        ruined[:, i], ruin_time[:, i] = _first_ruin(p, t, z, ui, ri, n_block)
        terminal[:, i] = u[i] + line.premium * T - np.bincount(p, weights=z, minlength=n_block)
    agg = None
    if aggregate is not None:
        sel = list(aggregate)
        p = np.concatenate([claims[i][0] for i in sel])
        t = np.concatenate([claims[i][1] for i in sel])
        z = np.concatenate([claims[i][2] for i in sel])
        u_tot = np.full(n_block, sum(u[i] for i in sel))
        r_tot = np.full(n_block, sum(model.lines[i].premium for i in sel))
        agg, _ = _first_ruin(p, t, z, u_tot, r_tot, n_block)
    return ruined, ruin_time, terminal, states, agg


def simulate_paths(
    model: ModelSpec,
    u: Sequence[float],
    T: float,
    n_paths: int,
    seed,
    *,
    grid: PeriodGrid | None = None,
    state: int | None = None,
    aggregate: Sequence[int] | None = None,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> PathBatch:
    """Simulate ``n_paths`` independent joint paths on ``[0, T]``.

    Args:
        state: hold every path in this state; otherwise the environment
            follows ``model.environment.dynamics`` on ``grid`` (unit
            periods by default).
        aggregate: also report ruin of the summed surplus of these lines.
        workers: threads used for blocks; does not change the output.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (model.n_lines,) or np.any(u < 0):
        raise ValueError("need one non-negative reserve per line")
    if not T > 0:
        raise ValueError("horizon must be positive")
    if n_paths < 1:
        raise ValueError("need at least one path")
    fixed = state is not None or isinstance(model.environment.dynamics, Fixed)
    if fixed:
        bounds = np.array([0.0, float(T)])
    else:
        bounds = np.asarray((grid or PeriodGrid.uniform(max(1, math.ceil(T)))).covering(T).boundaries)
    override = None if state is None else np.int64(state)
    sizes = [min(block_size, n_paths - s) for s in range(0, n_paths, block_size)]

    def run(b):
        return _simulate_block(model, u, T, bounds, seed, _TAG_PATHS, b, sizes[b], override, aggregate)

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    agg = np.concatenate([p[4] for p in parts]) if aggregate is not None else None
    return PathBatch(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        agg,
    )


def simulate_path(model: ModelSpec, u: Sequence[float], T: float, seed, grid: PeriodGrid | None = None) -> PathResult:
    batch = simulate_paths(model, u, T, 1, seed, grid=grid)
    return PathResult(batch.ruined[0], batch.ruin_time[0], batch.terminal[0], batch.states[0])


def _estimate(hits: np.ndarray) -> MonteCarloEstimate:
    n = hits.size
    p = float(hits.mean())
    return MonteCarloEstimate(p, math.sqrt(p * (1.0 - p) / n), n)


def monte_carlo_ruin(
    model: ModelSpec,
    u: Sequence[float],
    T: float,
    *,
    state: int | None = None,
    weights=None,
    event: str = "all",
    subset: Sequence[int] | None = None,
    line: int | None = None,
    n_paths: int = 100_000,
    seed=0,
    workers: int = 1,
) -> MonteCarloEstimate:
    """Frequency estimate of a ruin event with its binomial standard error.

    ``event`` is ``"line"`` (needs ``line``), ``"all"``, ``"any"`` or
    ``"aggregate"`` over ``subset`` (default: every line).

    With ``weights`` the state is mixed: each state with positive weight is
    simulated with ``n_paths`` paths and the conditional estimates are
    combined as ``sum_j w_j p_j`` (standard error ``sqrt(sum w_j^2 se_j^2)``).
    Without ``state`` or ``weights`` the environment dynamics are followed.
    """
    subset = tuple(range(model.n_lines)) if subset is None else tuple(subset)
    if event == "line":
        if line is None:
            raise ValueError("event 'line' needs a line index")
    elif event not in ("all", "any", "aggregate"):
        raise ValueError(f"unknown ruin event {event!r}")

    def hits_for(st, key):
        batch = simulate_paths(
            model, u, T, n_paths, key, state=st,
            aggregate=subset if event == "aggregate" else None, workers=workers,
        )
        if event == "line":
            return batch.ruined[:, line]
        if event == "aggregate":
            return batch.aggregate_ruined
        cols = batch.ruined[:, list(subset)]
        return cols.all(axis=1) if event == "all" else cols.any(axis=1)

    if weights is None:
        return _estimate(hits_for(state, seed))
    w = np.asarray(weights, dtype=float)
    est, var = 0.0, 0.0
    base = _seed_entropy(seed)
    base = list(base) if isinstance(base, list) else [base]
    for j in np.flatnonzero(w > 0):
        e = _estimate(hits_for(int(j), base + [int(j)]))
        est += w[j] * e.estimate
        var += (w[j] * e.stderr) ** 2
    return MonteCarloEstimate(est, math.sqrt(var), n_paths)


def single_line_ruin(line: BusinessLine, state: int, u: float, T: float, *, n_paths: int, seed=0, workers: int = 1) -> MonteCarloEstimate:
    """Monte Carlo ruin probability of one line held in one state."""
    J = line.n_states
    env = EnvironmentSpec(tuple(1.0 if j == state else 0.0 for j in range(J)), Fixed(state))
    model = ModelSpec((line,), env)
    return monte_carlo_ruin(model, [u], T, state=state, event="line", line=0, n_paths=n_paths, seed=seed, workers=workers)


# -- observations --------------------------------------------------------------


def simulate_observations(model: ModelSpec, grid: PeriodGrid, seed) -> tuple[list[ObservationBatch], np.ndarray]:
    """Per-period claim counts and sizes for every line, and the realised states."""
    env_rng = make_rng(seed, _TAG_OBS, 0)
    states = realize_states(model.environment, grid.n_periods, env_rng)[0]
    rng = make_rng(seed, _TAG_OBS, 1)
    batches = []
    for m, length in enumerate(grid.lengths):
        j = int(states[m])
        counts, sizes = [], []
        for line in model.lines:
            y = int(rng.poisson(line.intensities[j] * length))
            counts.append(y)
            sizes.append(tuple(float(z) for z in line.claims[j].sample(rng, y)))
        batches.append(ObservationBatch(m + 1, tuple(counts), tuple(sizes)))
    return batches, states


class ObservationFormatError(ValueError):
    """Observation CSV does not follow the period,line,count,sizes schema."""


OBSERVATION_COLUMNS = ("period", "line", "count", "sizes")


def write_observations(path: str | Path, batches: Iterable[ObservationBatch]) -> None:
    """CSV with one row per (period, line); sizes joined with ``;`` in repr form."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBSERVATION_COLUMNS)
        for b in batches:
            for i, (y, z) in enumerate(zip(b.counts, b.sizes)):
                w.writerow([b.period, i, y, ";".join(repr(float(x)) for x in z)])


def read_observations(path: str | Path, n_lines: int | None = None) -> list[ObservationBatch]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    if tuple(rows[0]) != OBSERVATION_COLUMNS:
        raise ObservationFormatError(f"expected header {','.join(OBSERVATION_COLUMNS)}, got {rows[0]}")
    by_period: dict[int, dict[int, tuple[int, tuple[float, ...]]]] = {}
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ObservationFormatError(f"row {k}: expected 4 fields, got {len(row)}")
        try:
            m, i, y = int(row[0]), int(row[1]), int(row[2])
            z = tuple(float(x) for x in row[3].split(";")) if row[3] else ()
        except ValueError as exc:
            raise ObservationFormatError(f"row {k}: {exc}") from None
        if len(z) != y:
            raise ObservationFormatError(f"row {k}: count {y} but {len(z)} sizes")
        by_period.setdefault(m, {})[i] = (y, z)
    width = n_lines if n_lines is not None else 1 + max(i for d in by_period.values() for i in d)
    batches = []
    for m in sorted(by_period):
        d = by_period[m]
        if sorted(d) != list(range(width)):
            raise ObservationFormatError(f"period {m}: lines {sorted(d)}, expected 0..{width - 1}")
        batches.append(ObservationBatch(m, tuple(d[i][0] for i in range(width)), tuple(d[i][1] for i in range(width))))
    return batches
