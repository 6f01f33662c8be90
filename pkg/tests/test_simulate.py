import math

import numpy as np
import pytest

from envrisk.model import BusinessLine, EnvironmentSpec, ExponentialClaims, Fixed, GaussianClaims, ModelSpec, Resampled, SwitchAt
from envrisk.ruin import ruin_exact_exponential
from envrisk.scenarios import example1, example3_resampled, example3_switch, example4
from envrisk.simulate import (
    ObservationBatch,
    ObservationFormatError,
    PeriodGrid,
    make_rng,
    monte_carlo_ruin,
    read_observations,
    realize_states,
    simulate_observations,
    simulate_path,
    simulate_paths,
    single_line_ruin,
    write_observations,
)

from .conftest import exp_line, single_state_model


def test_period_grid():
    g = PeriodGrid.uniform(4, 0.5)
    assert g.n_periods == 4 and np.allclose(g.lengths, 0.5)
    assert PeriodGrid((0, 1, 3)).covering(2.5).boundaries == (0.0, 1.0, 2.5)
    assert PeriodGrid.uniform(2).covering(4.5).boundaries == (0.0, 1.0, 2.0, 3.0, 4.0, 4.5)
    with pytest.raises(ValueError):
        PeriodGrid((0, 1, 1))
    with pytest.raises(ValueError):
        PeriodGrid((1, 2))


def test_observation_batch_validation():
    with pytest.raises(ValueError):
        ObservationBatch(1, (2,), ((1.0,),))
    with pytest.raises(ValueError):
        ObservationBatch(1, (1, 0), ((1.0,),))


def test_no_claims_no_ruin():
    m = single_state_model(exp_line(1e-9))
    est = monte_carlo_ruin(m, [0.0], 1.0, event="line", line=0, n_paths=100_000, seed=1)
    assert est.estimate == 0.0 and est.stderr == 0.0


def test_huge_reserve_no_ruin():
    m = example1()
    b = simulate_paths(m, [1e9, 1e9], 1.0, 100_000, seed=2)
    assert not b.ruined.any()


def test_zero_reserve_long_horizon():
    m = single_state_model(exp_line(0.5))
    est = monte_carlo_ruin(m, [0.0], 200.0, event="line", line=0, n_paths=20_000, seed=3)
    assert abs(est.estimate - 0.5) <= 3 * est.stderr + 0.002  # finite-T deficit is ~1e-3


def test_agrees_with_exact_formula():
    m = example1()
    for line, j in [(0, 0), (0, 2), (1, 1)]:
        lam = m.lines[line].intensities[j]
        est = single_line_ruin(m.lines[line], j, 2.0, 1.0, n_paths=200_000, seed=11 + j)
        exact = ruin_exact_exponential(2.0, 1.0, lam, 1.0, 1.0)
        assert abs(est.estimate - exact) <= 3 * est.stderr


def test_estimator_definition_and_scaling():
    m = single_state_model(exp_line(0.8))
    a = monte_carlo_ruin(m, [1.0], 1.0, event="line", line=0, n_paths=40_000, seed=4)
    b = monte_carlo_ruin(m, [1.0], 1.0, event="line", line=0, n_paths=80_000, seed=4)
    assert 0 <= a.estimate <= 1
    assert a.stderr == pytest.approx(math.sqrt(a.estimate * (1 - a.estimate) / 40_000))
    assert b.stderr / a.stderr == pytest.approx(1 / math.sqrt(2), rel=0.05)


def test_ruin_time_and_terminal_consistency():
    m = example1()
    b = simulate_paths(m, [1.0, 2.0], 3.0, 5000, seed=5)
    t = b.ruin_time[b.ruined]
    assert np.all((t >= 0) & (t <= 3.0))
    assert np.all(np.isnan(b.ruin_time[~b.ruined]))
    # a surviving line ends at or above zero
    assert np.all(b.terminal[~b.ruined] >= 0)


def test_reproducible_and_worker_independent():
    m = example3_resampled()
    a = simulate_paths(m, [2.0, 2.0], 4.0, 70_000, seed=7, workers=1)
    b = simulate_paths(m, [2.0, 2.0], 4.0, 70_000, seed=7, workers=3)
    c = simulate_paths(m, [2.0, 2.0], 4.0, 70_000, seed=7, workers=1, block_size=1 << 15)
    for x, y in [(a, b), (a, c)]:
        assert np.array_equal(x.ruined, y.ruined)
        assert np.array_equal(x.terminal, y.terminal)
        assert np.array_equal(x.states, y.states)
    d = simulate_paths(m, [2.0, 2.0], 4.0, 70_000, seed=8)
    assert not np.array_equal(a.terminal, d.terminal)


def test_simulate_path_single():
    m = example3_switch()
    p = simulate_path(m, [3.0, 3.0], 12.0, seed=1)
    assert p.states.tolist() == [0] * 10 + [1] * 2
    assert p.ruined.shape == (2,)


def test_conditional_independence():
    line = BusinessLine(1.0, (0.9,), (ExponentialClaims(1.0),))
    m = single_state_model(line, line)
    b = simulate_paths(m, [0.5, 0.5], 1.0, 100_000, seed=9)
    x, y = b.ruined[:, 0].astype(float), b.ruined[:, 1].astype(float)
    r = np.corrcoef(x, y)[0, 1]
    assert abs(r) <= 3 / math.sqrt(x.size)


def test_environment_induces_dependence():
    # same lines, state drawn per path: ruin indicators become positively correlated
    line = BusinessLine(1.0, (0.2, 2.0), (ExponentialClaims(1.0),) * 2)
    m = ModelSpec((line, line), EnvironmentSpec((0.5, 0.5), Resampled()))
    b = simulate_paths(m, [0.5, 0.5], 1.0, 50_000, seed=10)
    r = np.corrcoef(b.ruined[:, 0], b.ruined[:, 1])[0, 1]
    assert r > 10 / math.sqrt(50_000)


def test_all_any_aggregate_events():
    m = example1()
    u = [1.0, 1.0]
    kw = dict(state=0, n_paths=30_000, seed=12)
    all_ = monte_carlo_ruin(m, u, 1.0, event="all", **kw).estimate
    any_ = monte_carlo_ruin(m, u, 1.0, event="any", **kw).estimate
    agg = monte_carlo_ruin(m, u, 1.0, event="aggregate", **kw).estimate
    assert all_ <= agg <= any_
    with pytest.raises(ValueError):
        monte_carlo_ruin(m, u, 1.0, event="line")
    with pytest.raises(ValueError):
        monte_carlo_ruin(m, u, 1.0, event="nope")


def test_mixture_is_weighted_average():
    m = example1()
    w = (0.2, 0.5, 0.3)
    mix = monte_carlo_ruin(m, [2.0, 2.0], 1.0, weights=w, event="line", line=0, n_paths=50_000, seed=13)
    exact = sum(wj * ruin_exact_exponential(2.0, 1.0, lam, 1, 1) for wj, lam in zip(w, m.lines[0].intensities))
    assert abs(mix.estimate - exact) <= 3 * mix.stderr


def test_gaussian_claims_can_be_negative():
    m = example4()
    batches, _ = simulate_observations(m, PeriodGrid.uniform(300), seed=1)
    sizes = np.concatenate([np.array(z) for b in batches for z in b.sizes])
    assert (sizes < 0).any()
    assert abs(sizes.mean() - 1.0) <= 3 / math.sqrt(sizes.size)


def test_realize_states():
    rng = make_rng(0, 1)
    env = EnvironmentSpec((0.0, 1.0), Fixed(1))
    assert np.all(realize_states(env, 5, rng, 3) == 1)
    env = EnvironmentSpec((1.0, 0.0, 0.0), SwitchAt(10, 0, 1))
    assert realize_states(env, 12, rng)[0].tolist() == [0] * 10 + [1] * 2
    env = EnvironmentSpec((0.2, 0.3, 0.5), Resampled())
    s = realize_states(env, 20_000, rng)[0]
    freq = np.bincount(s, minlength=3) / s.size
    assert np.allclose(freq, (0.2, 0.3, 0.5), atol=3 * math.sqrt(0.25 / s.size))


def test_observation_counts_and_sizes():
    m = example1()
    grid = PeriodGrid.uniform(100_000)
    batches, states = simulate_observations(m, grid, seed=21)
    assert np.all(states == 0)
    y = np.array([b.counts for b in batches])
    for i, lam in enumerate((0.5, 0.6)):
        assert abs(y[:, i].mean() - lam) <= 3 * math.sqrt(lam / y.shape[0])
    z = np.concatenate([np.array(b.sizes[0]) for b in batches])
    assert abs(z.mean() - 1.0) <= 3 / math.sqrt(z.size)


def test_observations_period_lengths():
    m = single_state_model(exp_line(2.0))
    grid = PeriodGrid((0.0, 0.25, 4.25))
    tot = np.zeros(2)
    for s in range(3000):
        batches, _ = simulate_observations(m, grid, seed=[5, s])
        tot += [b.counts[0] for b in batches]
    assert tot[0] / 3000 == pytest.approx(0.5, abs=0.05)
    assert tot[1] / 3000 == pytest.approx(8.0, abs=0.3)


def test_observations_reproducible():
    m = example3_resampled()
    a = simulate_observations(m, PeriodGrid.uniform(50), seed=3)
    b = simulate_observations(m, PeriodGrid.uniform(50), seed=3)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_observation_csv_round_trip(tmp_path):
    m = example4()
    batches, _ = simulate_observations(m, PeriodGrid.uniform(40), seed=2)
    path = tmp_path / "obs.csv"
    write_observations(path, batches)
    assert read_observations(path, 5) == batches
    assert read_observations(path) == batches


def test_observation_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("period,line,count\n1,0,0\n")
    with pytest.raises(ObservationFormatError):
        read_observations(p)
    p.write_text("period,line,count,sizes\n1,0,2,1.0\n")
    with pytest.raises(ObservationFormatError):
        read_observations(p)
    p.write_text("period,line,count,sizes\n1,0,0,\n2,1,0,\n")
    with pytest.raises(ObservationFormatError):
        read_observations(p)
    p.write_text("")
    assert read_observations(p) == []


def test_simulate_paths_validation():
    m = example1()
    with pytest.raises(ValueError):
        simulate_paths(m, [1.0], 1.0, 10, 0)
    with pytest.raises(ValueError):
        simulate_paths(m, [1.0, -1.0], 1.0, 10, 0)
    with pytest.raises(ValueError):
        simulate_paths(m, [1.0, 1.0], 0.0, 10, 0)
    with pytest.raises(ValueError):
        simulate_paths(m, [1.0, 1.0], 1.0, 0, 0)
