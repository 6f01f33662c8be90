import json
import math

import numpy as np
import pytest

from envrisk import __version__
from envrisk.calibrate import calibrate, read_trace
from envrisk.cli import ARFWEDSON_COLUMNS, main, read_table
from envrisk.model import model_to_dict
from envrisk.ruin import ruin_exact_exponential
from envrisk.scenarios import example1, example3_resampled
from envrisk.simulate import read_observations


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def ex1_config(tmp_path):
    path = tmp_path / "ex1.json"
    path.write_text(json.dumps(model_to_dict(example1())))
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert capsys.readouterr().out.strip() == f"envrisk {__version__}"


def test_ruin_prob_exact(capsys):
    code, out, _ = run(capsys, "ruin-prob", "--u", 5, "--T", 1, "--lambda", 0.6)
    assert code == 0
    d = json.loads(out)
    assert d["method"] == "exact"
    assert d["value"] == pytest.approx(ruin_exact_exponential(5, 1, 0.6, 1, 1), rel=1e-12)


def test_ruin_prob_mean_and_arfwedson(capsys):
    code, out, _ = run(capsys, "ruin-prob", "--u", 10, "--T", 5, "--lambda", 0.5, "--mean", 2, "--r", 1.5)
    assert code == 0
    assert json.loads(out)["value"] == pytest.approx(ruin_exact_exponential(10, 5, 0.5, 0.5, 1.5), rel=1e-12)
    code, out, _ = run(capsys, "ruin-prob", "--u", 10, "--T", 5, "--lambda", 0.5, "--method", "arfwedson")
    d = json.loads(out)
    assert code == 0 and d["method"] == "arfwedson" and d["regime"].startswith("profit")


def test_ruin_prob_gaussian_mc(capsys):
    argv = ["ruin-prob", "--u", 2, "--T", 1, "--lambda", 0.709, "--gaussian", 1, 1, "--method", "montecarlo", "--paths", 20000, "--seed", 5]
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv, "--workers", 2)
    assert json.loads(a)["method"] == "montecarlo"
    assert a == b


def test_ruin_prob_bad_input(capsys):
    code, _, err = run(capsys, "ruin-prob", "--u", -1, "--T", 1, "--lambda", 0.5)
    assert code == 2 and "--u" in err
    code, _, _ = run(capsys, "ruin-prob", "--u", 1, "--T", 1, "--lambda", -0.5)
    assert code == 2


def test_simulate_then_calibrate(capsys, tmp_path, ex1_config):
    obs, states = tmp_path / "obs.csv", tmp_path / "states.csv"
    code, _, _ = run(capsys, "simulate", "--config", ex1_config, "--periods", 40, "--seed", 3, "--out", obs, "--states", states)
    assert code == 0
    head, rows = read_table(states)
    assert head == ["period", "state"] and len(rows) == 40 and {r[1] for r in rows} == {"0"}
    trace_path = tmp_path / "trace.csv"
    code, _, _ = run(capsys, "calibrate", "--observations", obs, "--config", ex1_config, "--out", trace_path)
    assert code == 0
    expected = calibrate(example1(), read_observations(obs, 2))
    assert [r[1] for r in read_trace(trace_path)] == [s.probabilities for s in expected]
    # stdout variant carries the same bytes
    _, out, _ = run(capsys, "calibrate", "--observations", obs, "--config", ex1_config)
    assert out == trace_path.read_text()


def test_calibrate_empty_and_mle(capsys, tmp_path):
    cfg = tmp_path / "ex3.json"
    cfg.write_text(json.dumps(model_to_dict(example3_resampled())))
    empty = tmp_path / "empty.csv"
    empty.write_text("period,line,count,sizes\n")
    code, out, _ = run(capsys, "calibrate", "--observations", empty, "--config", cfg)
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 2 and lines[1].startswith("0,")
    obs = tmp_path / "obs.csv"
    run(capsys, "simulate", "--config", cfg, "--periods", 30, "--seed", 1, "--out", obs)
    code, out, _ = run(capsys, "calibrate", "--observations", obs, "--config", cfg, "--mode", "mle")
    last = out.strip().splitlines()[-1].split(",")
    assert code == 0 and last[0] == "30" and last[-2] == "mle"
    assert all(float(x) * 30 == pytest.approx(round(float(x) * 30)) for x in last[1:4])


def test_calibrate_bad_files(capsys, tmp_path, ex1_config):
    bad = tmp_path / "bad.csv"
    bad.write_text("nonsense\n1\n")
    assert run(capsys, "calibrate", "--observations", bad, "--config", ex1_config)[0] == 2
    assert run(capsys, "calibrate", "--observations", tmp_path / "missing.csv", "--config", ex1_config)[0] == 2
    badcfg = tmp_path / "cfg.json"
    badcfg.write_text('{"lines": []}')
    assert run(capsys, "simulate", "--config", badcfg, "--periods", 2, "--out", tmp_path / "o.csv")[0] == 2


def _alloc_config(tmp_path, **extra):
    d = {
        "lines": [{"r": 1, "lambda": 0.5, "claims": {"type": "exponential", "rate": 1}}],
        "environment": {"p": [1.0]},
        "T": 1,
        "constraints": [{"subset": [0], "delta": 0.01}],
    }
    d.update(extra)
    path = tmp_path / "alloc.json"
    path.write_text(json.dumps(d))
    return path


def test_allocate_one_d(capsys, tmp_path):
    code, out, _ = run(capsys, "allocate", "--config", _alloc_config(tmp_path), "--kkt")
    d = json.loads(out)
    assert code == 0
    assert ruin_exact_exponential(d["u"][0], 1, 0.5, 1, 1) == pytest.approx(0.01, rel=1e-4)
    assert d["kkt"]["is_kkt"] and d["active"] == [0]
    assert d["constraints"][0]["slack"] >= -1e-8


def test_allocate_weights_override(capsys, tmp_path):
    d = model_to_dict(example1())
    d.update(T=1, family="singletons", base=0.01)
    path = tmp_path / "ex1.json"
    path.write_text(json.dumps(d))
    _, a, _ = run(capsys, "allocate", "--config", path)
    _, b, _ = run(capsys, "allocate", "--config", path, "--weights", "0,0,1")
    ua, ub = json.loads(a)["u"], json.loads(b)["u"]
    assert ub[0] > ua[0] and ub[1] == pytest.approx(ua[1], abs=5e-3)


def test_allocate_infeasible_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "allocate", "--config", _alloc_config(tmp_path, upper=1.0))
    assert code == 3
    assert "constraint 0" in err and "(0,)" in err


def test_allocate_bad_config(capsys, tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps(model_to_dict(example1())))
    assert run(capsys, "allocate", "--config", path)[0] == 2


def test_arfwedson_report(capsys, tmp_path):
    out = tmp_path / "arf.csv"
    code, _, _ = run(capsys, "arfwedson-report", "--u", "1,5,20", "--T", "1,5", "--out", out)
    head, rows = read_table(out)
    assert code == 0 and tuple(head) == ARFWEDSON_COLUMNS and len(rows) == 6
    # kappa'(gamma) = 1 for lambda = .5, theta = r = 1: the regime flips at T = u
    regime = {(float(r[0]), float(r[1])): r[5] for r in rows}
    assert regime[(5.0, 5.0)] == "profit:at"
    assert regime[(1.0, 5.0)] == "profit:after"
    assert regime[(20.0, 5.0)] == "profit:before"
    for r in rows:
        assert float(r[2]) == pytest.approx(ruin_exact_exponential(float(r[0]), float(r[1]), 0.5, 1, 1), rel=1e-12)
    _, stdout, _ = run(capsys, "arfwedson-report", "--u", "1,5,20", "--T", "1,5")
    assert stdout == out.read_text()


def test_run_example_posterior_outputs(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("ENVRISK_OUT", str(tmp_path / "env"))
    code, out, _ = run(capsys, "run-example", 1, "--trials", 4, "--periods", 30, "--skip-allocation")
    assert code == 0
    base = tmp_path / "env"
    head, rows = read_table(base / "ex1_bands.csv")
    assert len(head) == 1 + 3 * 3 and len(rows) == 31
    for r in rows:
        for j in range(3):
            mean, lo, hi = (float(x) for x in r[1 + 3 * j : 4 + 3 * j])
            assert lo <= mean + 1e-15 and mean <= hi + 1e-15
    manifest = json.loads((base / "ex1_manifest.json").read_text())
    assert manifest["version"] == __version__ and "ex1_bands.csv" in manifest["files"]
    assert str(base / "ex1_posterior.csv") in out


def test_run_example_deterministic_across_workers(capsys, tmp_path):
    args = ["run-example", 3, "--trials", 3, "--periods", 25, "--seed", 9, "--skip-allocation"]
    run(capsys, *args, "--out", tmp_path / "a", "--workers", 1)
    run(capsys, *args, "--out", tmp_path / "b", "--workers", 2)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"ex3_switch_w0.5.csv", "ex3_switch_w1.csv", "ex3_switch_w2.csv", "ex3_switch_first_crossing.csv", "ex3_resampled_mle.csv"} <= set(files)
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    head, rows = read_table(tmp_path / "a" / "ex3_switch_w1.csv")
    assert rows[-1][-1] == "1.0" and rows[-1][-2] == "weighted"
    head, rows = read_table(tmp_path / "a" / "ex3_switch_first_crossing.csv")
    assert head == ["trial", "w0.5", "w1", "w2"] and len(rows) == 3


def test_run_example2_json(capsys, tmp_path):
    code, _, _ = run(capsys, "run-example", 2, "--periods", 10, "--skip-allocation", "--format", "json", "--out", tmp_path)
    assert code == 0
    for v in "abcd":
        recs = json.loads((tmp_path / f"ex2{v}_bands.json").read_text())
        assert len(recs) == 11 and recs[0]["m"] == 0


def test_run_example_allocation_rows(capsys, tmp_path):
    code, _, _ = run(capsys, "run-example", 1, "--periods", 4, "--alloc-every", 2, "--out", tmp_path)
    assert code == 0
    head, rows = read_table(tmp_path / "ex1_allocation.csv")
    assert head == ["m", "u_1", "u_2", "objective", "rel_err_1", "rel_err_2"]
    assert [r[0] for r in rows] == ["2", "4"]
    for r in rows:
        assert float(r[3]) == pytest.approx(float(r[1]) + float(r[2]))


def test_run_example_bad_args(capsys, tmp_path):
    assert run(capsys, "run-example", 1, "--trials", 0, "--out", tmp_path)[0] == 2
    with pytest.raises(SystemExit):
        main(["run-example", "7"])
