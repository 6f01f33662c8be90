"""Command-line front end.

Commands: ``ruin-prob``, ``run-example``, ``simulate``, ``calibrate``,
``allocate`` and ``arfwedson-report``. Exit status is 0 on success, 2 on
invalid input and 3 when a numerical stage fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .allocate import (
    AllocationProblem,
    InfeasibleAllocationError,
    kkt_report,
    power_constraints,
    problem_from_dict,
    reserve_update_cycle,
    result_to_dict,
    solve,
    subset_family,
)
from .calibrate import Mode, calibrate, trace_array, write_trace
from .model import (
    BusinessLine,
    ExponentialClaims,
    GaussianClaims,
    ModelError,
    lundberg_root,
    kappa_prime,
    load_config,
    model_from_dict,
)
from .numerics import BracketError, IntegrationError
from .ruin import ArfwedsonError, Method, ruin_arfwedson, ruin_exact_exponential, ruin_prob
from .scenarios import (
    EXAMPLE2_VARIANTS,
    example1,
    example2,
    example3_resampled,
    example3_switch,
    example4,
)
from .simulate import ObservationFormatError, PeriodGrid, read_observations, simulate_observations, write_observations

OUT_ENV = "ENVRISK_OUT"
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


# -- output helpers ---------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def write_table(path: Path, header: Sequence[str], rows, fmt: str = "csv") -> Path:
    """CSV with repr floats, or a JSON list of records when ``fmt == 'json'``."""
    rows = [list(r) for r in rows]
    if fmt == "json":
        path = path.with_suffix(".json")
        recs = [{h: (float(v) if isinstance(v, np.floating) else v) for h, v in zip(header, r)} for r in rows]
        path.write_text(json.dumps(recs, indent=1, default=_json_default) + "\n")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, default=_json_default))


def _write_trace(path: Path, trace, fmt: str) -> Path:
    if fmt == "csv":
        write_trace(path, trace)
        return path
    J = len(trace[0].probabilities)
    rows = [[s.period, *s.probabilities, s.mode.value, s.weight] for s in trace]
    return write_table(path, ["m", *[f"p_{j + 1}" for j in range(J)], "mode", "w"], rows, fmt)


def _out_dir(arg: str | None) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or "envrisk-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- ruin-prob ---------------------------------------------------------------------


def _line_from_args(args) -> BusinessLine:
    if args.gaussian is not None:
        claims = GaussianClaims(*args.gaussian)
    elif args.mean is not None:
        claims = ExponentialClaims.from_mean(args.mean)
    else:
        claims = ExponentialClaims(args.theta if args.theta is not None else 1.0)
    return BusinessLine(args.r, (args.lam,), (claims,))


def cmd_ruin_prob(args) -> int:
    if not args.u >= 0:
        raise UsageError(f"--u must be non-negative, got {args.u}")
    if not args.T > 0:
        raise UsageError(f"--T must be positive, got {args.T}")
    line = _line_from_args(args)
    res = ruin_prob(line, 0, args.u, args.T, args.method, n_paths=args.paths, seed=args.seed, workers=args.workers)
    _dump({"value": res.value, "method": res.method, "regime": res.regime, "diagnostics": res.diagnostics})
    return 0


# -- run-example -------------------------------------------------------------------


def _bands(traces: np.ndarray, truth: np.ndarray) -> list[list]:
    """Per period and state: mean, 2.5% and 97.5% quantile of the absolute error."""
    err = np.abs(traces - truth[None, None, :])  # (trials, M+1, J)
    mean = err.mean(axis=0)
    lo = np.quantile(err, 0.025, axis=0)
    hi = np.quantile(err, 0.975, axis=0)
    rows = []
    for m in range(err.shape[1]):
        row = [m]
        for j in range(err.shape[2]):
            row += [mean[m, j], lo[m, j], hi[m, j]]
        rows.append(row)
    return rows


def _band_header(J: int) -> list[str]:
    return ["m"] + [f"{k}_{j + 1}" for j in range(J) for k in ("err_mean", "err_q025", "err_q975")]


def _allocation_template(model, T: float = 1.0, family: str = "all", mode: str = "all") -> AllocationProblem:
    cons = power_constraints(subset_family(model.n_lines, family), mode)
    return AllocationProblem(model, model.environment.probabilities, T, cons)


def _allocation_rows(model, grid, batches, template, mode, weight, every, reference=None):
    cycle = reserve_update_cycle(model, grid, batches, template, mode, weight, every=every)
    rows = []
    for post, res in cycle:
        row = [post.period, *res.u, res.objective]
        if reference is not None:
            row += list(np.abs(res.u - reference) / reference)
        rows.append(row)
    return rows


def _alloc_header(n: int, relative: bool) -> list[str]:
    h = ["m", *[f"u_{i + 1}" for i in range(n)], "objective"]
    return h + ([f"rel_err_{i + 1}" for i in range(n)] if relative else [])


def _trial_traces(model, grid, seed, trials, mode, weight, workers):
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]

    def one(t):
        batches, _ = simulate_observations(model, grid, [*base, t])
        return batches, calibrate(model, batches, grid.lengths, mode, weight)

    return _map(one, range(trials), workers)


def _run_example1(args, out: Path, written: list):
    model = example1()
    grid = PeriodGrid.uniform(args.periods)
    runs = _trial_traces(model, grid, args.seed, args.trials, Mode.BAYES, 1.0, args.workers)
    truth = np.array(model.environment.probabilities)
    written.append(_write_trace(out / "ex1_posterior.csv", runs[0][1], args.format))
    arr = np.array([trace_array(tr) for _, tr in runs])
    written.append(write_table(out / "ex1_bands.csv", _band_header(model.n_states), _bands(arr, truth), args.format))
    if args.skip_allocation:
        return
    template = _allocation_template(model)
    reference = solve(template).u
    rows = _allocation_rows(model, grid, runs[0][0], template, Mode.BAYES, 1.0, args.alloc_every, reference)
    written.append(write_table(out / "ex1_allocation.csv", _alloc_header(model.n_lines, True), rows, args.format))


def _run_example2(args, out: Path, written: list):
    grid = PeriodGrid.uniform(args.periods)
    for v in EXAMPLE2_VARIANTS:
        model = example2(v)
        runs = _trial_traces(model, grid, [args.seed, ord(v)], args.trials, Mode.BAYES, 1.0, args.workers)
        truth = np.array(model.environment.probabilities)
        written.append(_write_trace(out / f"ex2{v}_posterior.csv", runs[0][1], args.format))
        arr = np.array([trace_array(tr) for _, tr in runs])
        written.append(write_table(out / f"ex2{v}_bands.csv", _band_header(model.n_states), _bands(arr, truth), args.format))
        if args.skip_allocation:
            continue
        template = _allocation_template(model)
        rows = _allocation_rows(model, grid, runs[0][0], template, Mode.BAYES, 1.0, args.alloc_every, solve(template).u)
        written.append(write_table(out / f"ex2{v}_allocation.csv", _alloc_header(model.n_lines, True), rows, args.format))


def _first_crossing(trace, state: int, level: float = 0.5) -> int | None:
    for s in trace:
        if s.probabilities[state] > level:
            return s.period
    return None


def _run_example3(args, out: Path, written: list):
    model = example3_switch()
    grid = PeriodGrid.uniform(args.periods)
    weights = (0.5, 1.0, 2.0)
    crossings = []
    for w in weights:
        runs = _trial_traces(model, grid, [args.seed, 3], args.trials, Mode.WEIGHTED, w, args.workers)
        written.append(_write_trace(out / f"ex3_switch_w{w:g}.csv", runs[0][1], args.format))
        crossings.append([_first_crossing(tr, 1) for _, tr in runs])
        if args.skip_allocation:
            continue
        template = _allocation_template(model)
        rows = _allocation_rows(model, grid, runs[0][0], template, Mode.WEIGHTED, w, args.alloc_every)
        written.append(write_table(out / f"ex3_switch_allocation_w{w:g}.csv", _alloc_header(model.n_lines, False), rows, args.format))
    rows = [[t, *[("" if c[t] is None else c[t]) for c in crossings]] for t in range(args.trials)]
    written.append(write_table(out / "ex3_switch_first_crossing.csv", ["trial", *[f"w{w:g}" for w in weights]], rows, args.format))

    model = example3_resampled()
    runs = _trial_traces(model, grid, [args.seed, 33], args.trials, Mode.MLE, 1.0, args.workers)
    written.append(_write_trace(out / "ex3_resampled_mle.csv", runs[0][1], args.format))
    if args.skip_allocation:
        return
    template = _allocation_template(model)
    rows = _allocation_rows(model, grid, runs[0][0], template, Mode.MLE, 1.0, args.alloc_every)
    written.append(write_table(out / "ex3_resampled_allocation.csv", _alloc_header(model.n_lines, False), rows, args.format))


def _run_example4(args, out: Path, written: list):
    model = example4()
    grid = PeriodGrid.uniform(args.periods)
    runs = _trial_traces(model, grid, [args.seed, 4], args.trials, Mode.BAYES, 1.0, args.workers)
    written.append(_write_trace(out / "ex4_posterior.csv", runs[0][1], args.format))
    if args.skip_allocation:
        return
    rows = []
    for mode in ("all", "any"):
        for fam in ("singletons", "full+singletons", "all"):
            problem = _allocation_template(model, args.horizon, fam, mode)
            res = solve(problem)
            kkt = kkt_report(problem, res.u)
            rows.append([mode, fam, args.horizon, *res.u, res.objective, kkt.residual, int(kkt.is_kkt)])
    header = ["mode", "family", "T", *[f"u_{i + 1}" for i in range(model.n_lines)], "objective", "kkt_residual", "is_kkt"]
    written.append(write_table(out / "ex4_allocation.csv", header, rows, args.format))


_EXAMPLES = {1: _run_example1, 2: _run_example2, 3: _run_example3, 4: _run_example4}


def cmd_run_example(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    if args.periods < 1 or args.alloc_every < 1:
        raise UsageError("--periods and --alloc-every must be at least 1")
    out = _out_dir(args.out)
    written: list[Path] = []
    _EXAMPLES[args.example](args, out, written)
    manifest = {
        "version": __version__,
        "example": args.example,
        "seed": args.seed,
        "trials": args.trials,
        "periods": args.periods,
        "files": [p.name for p in written],
    }
    (out / f"ex{args.example}_manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    for p in written:
        print(p)
    return 0


# -- simulate / calibrate / allocate ---------------------------------------------------


def _load_model(path: str):
    try:
        return model_from_dict(load_config(path))
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bad model config {path}: {exc}") from None


def cmd_simulate(args) -> int:
    model = _load_model(args.config)
    grid = PeriodGrid.uniform(args.periods, args.length)
    batches, states = simulate_observations(model, grid, args.seed)
    write_observations(args.out, batches)
    if args.states:
        write_table(Path(args.states), ["period", "state"], [[m + 1, int(j)] for m, j in enumerate(states)])
    return 0


def cmd_calibrate(args) -> int:
    model = _load_model(args.config)
    batches = read_observations(args.observations, model.n_lines)
    trace = calibrate(model, batches, args.length, args.mode, args.w)
    if args.out:
        write_trace(args.out, trace)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["m", *[f"p_{j + 1}" for j in range(model.n_states)], "mode", "w"])
        for s in trace:
            w.writerow([s.period, *[repr(x) for x in s.probabilities], s.mode.value, repr(s.weight)])
    return 0


def cmd_allocate(args) -> int:
    try:
        cfg = load_config(args.config)
        problem = problem_from_dict(cfg)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bad allocation config {args.config}: {exc}") from None
    if args.weights:
        problem = problem.with_weights([float(x) for x in args.weights.split(",")])
    res = solve(problem)
    out = result_to_dict(res, problem)
    if args.kkt:
        k = kkt_report(problem, res.u)
        out["kkt"] = {"active": k.active, "multipliers": k.multipliers, "residual": k.residual, "is_kkt": k.is_kkt, "message": k.message}
    _dump(out)
    return 0


# -- arfwedson-report --------------------------------------------------------------


def arfwedson_rows(lam: float, theta: float, r: float, us: Sequence[float], Ts: Sequence[float]) -> list[list]:
    line = BusinessLine(r, (lam,), (ExponentialClaims(theta),))
    rows = []
    for T in Ts:
        for u in us:
            exact = ruin_exact_exponential(u, T, lam, theta, r)
            try:
                a = ruin_arfwedson(u, T, line, 0)
                approx, regime = a.value, a.regime
            except ArfwedsonError:
                approx, regime = math.nan, "undefined"
            rel = abs(approx - exact) / exact if exact > 0 else math.nan
            rows.append([u, T, exact, approx, rel, regime])
    return rows


ARFWEDSON_COLUMNS = ("u", "T", "exact", "arfwedson", "rel_error", "regime")


def cmd_arfwedson_report(args) -> int:
    rows = arfwedson_rows(args.lam, args.theta, args.r, args.u, args.T)
    if args.out:
        write_table(Path(args.out), ARFWEDSON_COLUMNS, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(ARFWEDSON_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return 0


# -- parser ---------------------------------------------------------------------------


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envrisk", description="Ruin probabilities and reserve allocation under a latent environment.")
    p.add_argument("--version", action="version", version=f"envrisk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ruin-prob", help="ruin probability of a single line")
    q.add_argument("--u", type=float, required=True)
    q.add_argument("--T", type=float, required=True)
    q.add_argument("--lambda", dest="lam", type=float, required=True)
    g = q.add_mutually_exclusive_group()
    g.add_argument("--theta", type=float, help="exponential claim rate (default 1)")
    g.add_argument("--mean", type=float, help="exponential claim mean")
    g.add_argument("--gaussian", type=float, nargs=2, metavar=("MEAN", "STD"))
    q.add_argument("--r", type=float, default=1.0)
    q.add_argument("--method", choices=[m.value for m in Method], default="auto")
    q.add_argument("--paths", type=int, default=100_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.set_defaults(func=cmd_ruin_prob)

    q = sub.add_parser("run-example", help="emit the data behind one of the four worked examples")
    q.add_argument("example", type=int, choices=sorted(_EXAMPLES))
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--trials", type=int, default=1)
    q.add_argument("--periods", type=int, default=500)
    q.add_argument("--alloc-every", type=int, default=50, help="re-solve the allocation every k periods")
    q.add_argument("--horizon", type=float, default=1000.0, help="Example 4 allocation horizon")
    q.add_argument("--skip-allocation", action="store_true", help="write posterior files only")
    q.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./envrisk-out)")
    q.add_argument("--format", choices=("csv", "json"), default="csv")
    q.add_argument("--workers", type=int, default=1)
    q.set_defaults(func=cmd_run_example)

    q = sub.add_parser("simulate", help="simulate per-period claim observations")
    q.add_argument("--config", required=True)
    q.add_argument("--periods", type=int, required=True)
    q.add_argument("--length", type=float, default=1.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--states", help="also write the realised states here")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("calibrate", help="posterior trace from an observation CSV")
    q.add_argument("--observations", required=True)
    q.add_argument("--config", required=True)
    q.add_argument("--mode", choices=[m.value for m in Mode], default="bayes")
    q.add_argument("--w", type=float, default=1.0)
    q.add_argument("--length", type=float, default=1.0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("allocate", help="solve a reserve allocation problem")
    q.add_argument("--config", required=True)
    q.add_argument("--weights", help="comma-separated state weights overriding the config")
    q.add_argument("--kkt", action="store_true", help="append a KKT report")
    q.set_defaults(func=cmd_allocate)

    q = sub.add_parser("arfwedson-report", help="exact vs Arfwedson over a (u, T) grid")
    q.add_argument("--lambda", dest="lam", type=float, default=0.5)
    q.add_argument("--theta", type=float, default=1.0)
    q.add_argument("--r", type=float, default=1.0)
    q.add_argument("--u", type=_floats, default=[1.0, 2.0, 5.0, 10.0, 20.0])
    q.add_argument("--T", type=_floats, default=[1.0, 5.0])
    q.add_argument("--out")
    q.set_defaults(func=cmd_arfwedson_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (IntegrationError, BracketError, ArfwedsonError, InfeasibleAllocationError, FloatingPointError, ArithmeticError) as exc:
        print(f"envrisk: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ModelError, ObservationFormatError, ValueError, OSError) as exc:
        print(f"envrisk: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as exc:
        print(f"envrisk: failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
