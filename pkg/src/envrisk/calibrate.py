"""Estimating the environmental state distribution from observed claims.

Three estimators share one per-period likelihood:

* ``bayes``: the posterior ``p_j^m ∝ p_j^{m-1} f(Y^m, Z^m | j)`` for a state
  that never changes;
* ``weighted``: the same recursion with the previous posterior raised to a
  power ``w`` first (``w < 1`` forgets faster and so reacts to switches);
* ``mle``: for a state redrawn every period, the running frequency of the
  per-period maximum-likelihood state.

Likelihoods are handled in log space. The ``log y!`` terms are dropped: they
are common to every state and cancel in all ratios and argmaxes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ModelSpec
from .simulate import ObservationBatch


class ImpossibleObservationError(ValueError):
    """The observation has zero likelihood under every state with positive weight."""


class Mode(str, Enum):
    BAYES = "bayes"
    WEIGHTED = "weighted"
    MLE = "mle"


@dataclass(frozen=True)
class PosteriorState:
    probabilities: tuple[float, ...]
    period: int = 0
    mode: Mode = Mode.BAYES
    weight: float = 1.0
    mle_counts: tuple[int, ...] = field(default=())

    def __post_init__(self):
        p = tuple(float(x) for x in self.probabilities)
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "mode", Mode(self.mode))
        if any(x < 0 for x in p) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"posterior must be a probability vector, got {p}")
        if not self.weight > 0:
            raise ValueError("weighting exponent must be positive")
        if self.mode is Mode.MLE and not self.mle_counts:
            object.__setattr__(self, "mle_counts", (0,) * len(p))

    @classmethod
    def prior(cls, n_states: int, mode: Mode | str = Mode.BAYES, weight: float = 1.0, probabilities=None) -> PosteriorState:
        """Starting state; uniform probabilities unless given."""
        p = probabilities if probabilities is not None else (1.0 / n_states,) * n_states
        return cls(tuple(p), 0, Mode(mode), weight)

    @property
    def p(self) -> np.ndarray:
        return np.array(self.probabilities)


def _line_loglik(lam, dist, y, z, length):
    ll = -lam * length + y * math.log(lam)
    if y:
        ll += float(np.sum(dist.logpdf(np.asarray(z, dtype=float))))
    return ll


def log_likelihood_period(model: ModelSpec, state: int, obs: ObservationBatch, length: float = 1.0) -> float:
    """``sum_i [-lambda_ij t + y_i log lambda_ij + sum_l log f_ij(z_il)]``.

    May be ``-inf`` (e.g. a negative size under exponential claims).
    """
    if len(obs.counts) != model.n_lines:
        raise ValueError(f"observation has {len(obs.counts)} lines, model has {model.n_lines}")
    total = 0.0
    for line, y, z in zip(model.lines, obs.counts, obs.sizes):
        total += _line_loglik(line.intensities[state], line.claims[state], y, z, length)
    return total


def log_likelihoods(model: ModelSpec, obs: ObservationBatch, length: float = 1.0) -> np.ndarray:
    return np.array([log_likelihood_period(model, j, obs, length) for j in range(model.n_states)])


def _normalize_log(logw: np.ndarray) -> np.ndarray:
    top = np.max(logw)
    if not np.isfinite(top):
        raise ImpossibleObservationError("observation impossible under every state")
    w = np.exp(logw - top)
    return w / w.sum()


def _tempered_update(post: PosteriorState, loglik: np.ndarray, w: float) -> tuple[float, ...]:
    p = post.p
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, w * np.log(p), -np.inf)
    return tuple(_normalize_log(logp + loglik))


def bayes_update(post: PosteriorState, model: ModelSpec, obs: ObservationBatch, length: float = 1.0) -> PosteriorState:
    """One step of the Bayes recursion; states at probability zero stay there."""
    if post.mode is not Mode.BAYES:
        raise ValueError(f"bayes_update on a {post.mode.value} posterior")
    p = _tempered_update(post, log_likelihoods(model, obs, length), 1.0)
    return replace(post, probabilities=p, period=post.period + 1)


def weighted_bayes_update(
    post: PosteriorState, model: ModelSpec, obs: ObservationBatch, length: float = 1.0, w: float | None = None
) -> PosteriorState:
    """Bayes step with the prior replaced by ``p^w`` (renormalised)."""
    w = post.weight if w is None else w
    if not w > 0:
        raise ValueError("weighting exponent must be positive")
    p = _tempered_update(post, log_likelihoods(model, obs, length), w)
    return replace(post, probabilities=p, period=post.period + 1)


def mle_state(model: ModelSpec, obs: ObservationBatch, length: float = 1.0) -> int:
    """Most likely state for this period; ties go to the lowest index."""
    return int(np.argmax(log_likelihoods(model, obs, length)))


def mle_frequency_update(post: PosteriorState, state: int) -> PosteriorState:
    """Running frequency ``p_i^m = (m-1)/m p_i^{m-1} + 1{J_m = i}/m``."""
    if post.mode is not Mode.MLE:
        raise ValueError(f"mle_frequency_update on a {post.mode.value} posterior")
    counts = list(post.mle_counts)
    counts[state] += 1
    m = post.period + 1
    p = tuple(c / m for c in counts)
    return replace(post, probabilities=p, period=m, mle_counts=tuple(counts))


def update(post: PosteriorState, model: ModelSpec, obs: ObservationBatch, length: float = 1.0) -> PosteriorState:
    """Advance ``post`` by one period according to its mode."""
    if post.mode is Mode.BAYES:
        return bayes_update(post, model, obs, length)
    if post.mode is Mode.WEIGHTED:
        return weighted_bayes_update(post, model, obs, length)
    return mle_frequency_update(post, mle_state(model, obs, length))


def calibrate(
    model: ModelSpec,
    batches: Iterable[ObservationBatch],
    lengths: Sequence[float] | float = 1.0,
    mode: Mode | str = Mode.BAYES,
    weight: float = 1.0,
    prior=None,
) -> list[PosteriorState]:
    """Full trace ``[p^0, p^1, ..., p^M]`` over a sequence of periods."""
    post = PosteriorState.prior(model.n_states, mode, weight, prior)
    trace = [post]
    for k, obs in enumerate(batches):
        length = lengths if isinstance(lengths, (int, float)) else lengths[k]
        post = update(post, model, obs, float(length))
        trace.append(post)
    return trace


def trace_array(trace: Sequence[PosteriorState]) -> np.ndarray:
    return np.array([s.probabilities for s in trace])


# -- CSV ------------------------------------------------------------------------


def write_trace(path: str | Path, trace: Sequence[PosteriorState]) -> None:
    """Columns ``m, p_1..p_J, mode, w``; probabilities in repr form."""
    J = len(trace[0].probabilities)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["m", *[f"p_{j + 1}" for j in range(J)], "mode", "w"])
        for s in trace:
            wr.writerow([s.period, *[repr(x) for x in s.probabilities], s.mode.value, repr(s.weight)])


def read_trace(path: str | Path) -> list[tuple[int, tuple[float, ...], str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    J = len(head) - 3
    if head[0] != "m" or head[-2:] != ["mode", "w"] or J < 1:
        raise ValueError(f"not a calibration trace header: {head}")
    return [(int(r[0]), tuple(float(x) for x in r[1 : 1 + J]), r[-2], float(r[-1])) for r in rows[1:]]
