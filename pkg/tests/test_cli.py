import json
import math
import subprocess
import sys

import numpy as np
import pytest

from walshlab.cli import EXIT_INVALID, EXIT_NA, EXIT_OK, EXIT_USAGE, dumps, render, run

from conftest import DATA


def spec_file(tmp_path, rays, name="m.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"rays": rays}))
    return str(path)


@pytest.fixture
def never_file(tmp_path):
    return spec_file(tmp_path, [{"theta": 0.0, "weight": 0.5, "ell": "inf", "b": 0.0, "s": 1.0},
                                {"theta": math.pi, "weight": 0.5, "ell": "inf", "b": 0.0, "s": 1.0}])


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- documented examples -----------------------------------------------------------

def test_classify_mixed(capsys):
    code, out, err = call(capsys, "classify", "--spec", DATA / "mixed.json", "--start", "origin")
    assert code == EXIT_OK
    assert "case: mixed (0 < P(S<∞) < 1)" in err
    verdict = json.loads(out)["verdict"]
    assert verdict["case"] == "mixed"


def test_stop_two_ray(capsys):
    code, out, err = call(capsys, "stop", "--spec", DATA / "two_ray.json", "--reward", DATA / "reward.json",
                          "--tol", "1e-8")
    assert code == EXIT_OK
    assert "c0 = 0.50000000" in err
    assert json.loads(out)["c0"] == pytest.approx(0.5, abs=1e-8)


def test_exit_law_two_thirds(capsys):
    code, out, err = call(capsys, "exit-law", "--spec", DATA / "two_thirds.json", "--start", "origin")
    assert code == EXIT_OK
    assert err.splitlines()[0] == "{0: 0.666667, π: 0.333333}"
    law = json.loads(out)["analytic"]
    assert law["atoms"][0]["probability"] == pytest.approx(2 / 3, abs=1e-12)


def test_control(capsys):
    code, out, err = call(capsys, "control", "--control", DATA / "control.json", "--reward", DATA / "reward.json")
    assert code == EXIT_OK
    assert err.startswith("c* = ")
    res = json.loads(out)
    assert {s["label"] for s in res["strategy"]} <= {"max-then-min", "min-after-plateau", "min-everywhere"}


@pytest.mark.parametrize("command", ["check", "profile", "classify", "exit-law"])
def test_deterministic_commands_succeed(capsys, command):
    code, out, err = call(capsys, command, "--spec", DATA / "two_ray.json")
    assert code == EXIT_OK
    assert json.loads(out) and err.strip()


# -- exit codes ------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["classify"], ["classify", "--spec", "x.json", "--bogus"],
    ["profile", "--spec", "x.json", "--format", "yaml"],
])
def test_usage_errors(capsys, argv):
    code, out, err = call(capsys, *argv)
    assert code == EXIT_USAGE
    assert out == "" and "usage" in err


@pytest.mark.parametrize("command", ["simulate", "exit-law --mc"])
def test_randomized_commands_require_seed(capsys, command):
    code, _, err = call(capsys, *command.split(), "--spec", DATA / "two_ray.json", "--paths", 5)
    assert code == EXIT_USAGE
    assert "--seed" in err


@pytest.mark.parametrize("extra", [["--tol", "0"], ["--tol", "-1"]])
def test_bad_tolerance(capsys, extra):
    code, _, _ = call(capsys, "stop", "--spec", DATA / "two_ray.json", "--reward", DATA / "reward.json", *extra)
    assert code == EXIT_USAGE


def test_bad_paths(capsys):
    code, _, _ = call(capsys, "simulate", "--spec", DATA / "two_ray.json", "--seed", 1, "--paths", 0)
    assert code == EXIT_USAGE


def test_invalid_inputs(capsys, tmp_path):
    assert call(capsys, "classify", "--spec", tmp_path / "missing.json")[0] == EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert call(capsys, "classify", "--spec", bad)[0] == EXIT_INVALID
    neg = spec_file(tmp_path, [{"theta": 0.0, "weight": 1.0, "ell": 1.0, "b": 0.0, "s": 0.0}])
    code, _, err = call(capsys, "classify", "--spec", neg)
    assert code == EXIT_INVALID and "invalid input" in err
    assert call(capsys, "classify", "--spec", DATA / "two_ray.json", "--start", "0.5@2.0")[0] == EXIT_INVALID
    assert call(capsys, "classify", "--spec", DATA / "two_ray.json", "--start", "nonsense")[0] == EXIT_INVALID


def test_check_failure_exit_code(capsys, tmp_path):
    bad = spec_file(tmp_path, [{"theta": 0.0, "weight": 1.0, "ell": 1.0, "b": 0.0, "s": 0.0}])
    code, out, _ = call(capsys, "check", "--spec", bad)
    assert code == EXIT_INVALID
    assert json.loads(out)["ok"] is False


def test_not_applicable(capsys, never_file):
    code, out, err = call(capsys, "exit-law", "--spec", never_file)
    assert code == EXIT_NA
    assert out == "" and "not applicable" in err


def test_stop_needs_unit_disc(capsys, never_file):
    assert call(capsys, "stop", "--spec", never_file, "--reward", DATA / "reward.json")[0] == EXIT_NA


# -- reproducibility and formats ---------------------------------------------------------

SIM = ["simulate", "--spec", str(DATA / "two_thirds.json"), "--paths", "40", "--step", "1e-3",
       "--horizon", "5", "--seed", "17"]


@pytest.mark.parametrize("argv", [
    SIM, SIM + ["--threads", "2"], SIM + ["--fs", "5"], SIM + ["--scheme", "euler-bridge"],
    ["exit-law", "--spec", str(DATA / "two_thirds.json"), "--mc", "--paths", "30", "--step", "1e-3", "--seed", "3"],
])
def test_byte_identical_json(tmp_path, argv):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(argv + ["--out", str(a)]) == EXIT_OK
    assert run(argv + ["--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    json.loads(a.read_text())


def test_seed_changes_output(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(SIM + ["--out", str(a)])
    run(SIM[:-1] + ["18", "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_threads_do_not_change_results(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(SIM + ["--threads", "1", "--out", str(a)])
    run(SIM + ["--threads", "3", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_simulate_dump(tmp_path, capsys):
    dump = tmp_path / "paths.csv"
    code, out, err = call(capsys, *SIM, "--dump", dump, "--dump-paths", 3)
    assert code == EXIT_OK
    rows = dump.read_text().splitlines()
    assert rows[0] == "path,t,r,theta,L"
    assert {r.split(",")[0] for r in rows[1:]} == {"0", "1", "2"}
    res = json.loads(out)
    assert sum(res["status"].values()) == 40


@pytest.mark.parametrize("fmt", ["csv", "text"])
def test_formats(capsys, fmt):
    code, out, _ = call(capsys, "exit-law", "--spec", DATA / "two_thirds.json", "--format", fmt)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert len(lines) == 3
    if fmt == "csv":
        assert lines[0] == "theta,probability"
        assert float(lines[1].split(",")[1]) == pytest.approx(2 / 3, abs=1e-15)
    else:
        assert lines[0].split() == ["theta", "probability"]


def test_profile_csv_table(capsys):
    code, out, _ = call(capsys, "profile", "--spec", DATA / "mixed.json", "--format", "csv", "--theta", 0.0,
                        "--n-grid", 16)
    assert code == EXIT_OK
    rows = out.splitlines()
    assert rows[0] == "theta,r,p,p_prime,m,v,u"
    r = np.array([float(x.split(",")[1]) for x in rows[1:]])
    assert r[0] == 0.0 and np.all(np.diff(r) > 0)


def test_profile_unknown_ray(capsys):
    assert call(capsys, "profile", "--spec", DATA / "mixed.json", "--theta", 1.0)[0] == EXIT_INVALID


# -- rendering helpers -------------------------------------------------------------------

@pytest.mark.parametrize("obj, text", [
    ({"b": 1, "a": [0.1, math.inf]}, '{"a": [0.10000000000000001, "inf"], "b": 1}'),
    ({"x": np.float64(-math.inf), "y": None, "z": True}, '{"x": "-inf", "y": null, "z": true}'),
    ([np.int64(3), "s", math.nan], '[3, "s", "nan"]'),
])
def test_dumps(obj, text):
    assert dumps(obj) == text


def test_dumps_round_trips_doubles():
    x = np.random.default_rng(0).normal(size=50) * 10.0 ** np.arange(-25, 25)
    np.testing.assert_array_equal(np.array(json.loads(dumps(x.tolist()))), x)


def test_render_nested_csv():
    text = render({"a": {"b": 1.5, "c": [1, 2]}, "d": [{"e": 2}]}, "csv")
    assert text.splitlines() == ["key,value", "a.b,1.5", "a.c,1 2", "d[0].e,2"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "walshlab", "exit-law", "--spec", str(DATA / "two_thirds.json")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "0.666667" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "walshlab", "nope"], capture_output=True, text=True, check=False)
    assert proc.returncode == EXIT_USAGE
