from __future__ import annotations

import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from drflex.cli import ConfigError, main, parse_range
from drflex.testbed import default_scenario


def run(tmp_path, *argv, out="out"):
    d = tmp_path / out
    code = main([*argv, "--out", str(d)])
    return code, d


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def check_manifest(d):
    m = manifest(d)
    for entry in m["outputs"]:
        p = d / entry["file"]
        assert p.exists()
        assert hashlib.sha256(p.read_bytes()).hexdigest() == entry["sha256"]
    return m


@pytest.fixture(scope="module")
def closed_and_open(tmp_path_factory):
    base = tmp_path_factory.mktemp("sim")
    codes = []
    for name, extra in (("closed", []), ("open", ["--open-loop"])):
        codes.append(main(["simulate", "--no-plot", "--out", str(base / name), *extra]))
    return codes, base


# ---------------------------------------------------------------- ranges

def test_parse_range():
    np.testing.assert_allclose(parse_range("0:0.05:1"), np.linspace(0, 1, 21), atol=1e-12)
    np.testing.assert_array_equal(parse_range("0.2"), [0.2])
    for bad in ("0:0:1", "1:0.1:0", "a:b:c", "0:1", "0:0.3:1"):
        with pytest.raises(ConfigError):
            parse_range(bad)


# ---------------------------------------------------------------- simulate

def test_default_closed_loop_run(closed_and_open):
    codes, base = closed_and_open
    assert codes[0] == 0
    m = check_manifest(base / "closed")
    assert m["command"] == "simulate" and m["seed"] == default_scenario().seed
    metrics = json.loads((base / "closed" / "metrics.json").read_text())
    assert isinstance(metrics["ramp_time_s"], float) and math.isfinite(metrics["ramp_time_s"])


def test_open_loop_ramp_is_infinite(closed_and_open):
    codes, base = closed_and_open
    assert codes[1] == 0
    metrics = json.loads((base / "open" / "metrics.json").read_text())
    assert metrics["ramp_time_s"] == "inf"
    assert metrics["mode"] == "open_loop"


def test_missing_scenario_exits_1_and_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.json"
    code, _ = run(tmp_path, "simulate", "--scenario", str(missing))
    assert code == 1
    assert str(missing) in capsys.readouterr().err


def test_malformed_scenario_exits_1(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"groups": []}))
    assert run(tmp_path, "simulate", "--scenario", str(p))[0] == 1


def test_infeasible_start_exits_2(tmp_path):
    d = default_scenario().to_dict()
    d["target"] = {"kind": "steps", "steps": [[0.0, 1.0]]}
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(d))
    assert run(tmp_path, "simulate", "--scenario", str(p), "--duration", "1", "--no-plot")[0] == 2


def test_divergence_exits_3_and_keeps_partial_trace(tmp_path):
    sc = default_scenario().linear()
    d = sc.to_dict()
    d["outer"] = {"kp": 40.0, "ki": 40.0}
    p = tmp_path / "wild.json"
    p.write_text(json.dumps(d))
    code, out = run(tmp_path, "simulate", "--scenario", str(p), "--no-plot")
    assert code == 3
    rows = (out / "trace.csv").read_text().splitlines()
    assert 1 < len(rows) < sc.steps + 2
    check_manifest(out)


def test_reruns_are_byte_identical(tmp_path):
    args = ("simulate", "--duration", "30", "--no-plot")
    _, a = run(tmp_path, *args, out="a")
    _, b = run(tmp_path, *args, out="b")
    for name in ("trace.csv", "metrics.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert manifest(a)["outputs"] == manifest(b)["outputs"]


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DRFLEX_SEED", "99")
    _, a = run(tmp_path, "simulate", "--duration", "5", "--no-plot", out="env")
    assert manifest(a)["seed"] == 99
    _, b = run(tmp_path, "simulate", "--duration", "5", "--no-plot", "--seed", "99", out="flag")
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    _, c = run(tmp_path, "simulate", "--duration", "5", "--no-plot", "--seed", "7", out="override")
    assert manifest(c)["seed"] == 7
    monkeypatch.setenv("DRFLEX_SEED", "x")
    assert run(tmp_path, "simulate", "--duration", "5", "--no-plot", out="bad")[0] == 1


def test_simulate_plots_by_default(tmp_path):
    code, out = run(tmp_path, "simulate", "--duration", "5")
    assert code == 0
    assert (out / "trace.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "trace.png" in [e["file"] for e in check_manifest(out)["outputs"]]


# ---------------------------------------------------------------- sweep

def test_sweep_single_point(tmp_path):
    code, out = run(tmp_path, "sweep", "--kp", "0.2", "--ki", "0.05", "--no-plot")
    assert code == 0
    rows = list(csv.reader((out / "sweep.csv").open()))
    assert rows[0] == ["kp", "ki", "value"]
    assert len(rows) == 2 and float(rows[1][2]) < 0
    check_manifest(out)


def test_sweep_full_grid_spans_both_signs(tmp_path):
    code, out = run(tmp_path, "sweep", "--kp", "0:0.05:1", "--ki", "0:0.05:1", "--jobs", "4")
    assert code == 0
    values = [float(r[2]) for r in list(csv.reader((out / "sweep.csv").open()))[1:]]
    assert len(values) == 441
    assert min(values) < 0 < max(values)
    assert (out / "sweep.png").exists()


def test_sweep_rejects_zero_step_and_unknown_loop(tmp_path):
    assert run(tmp_path, "sweep", "--kp", "0:0:1", "--ki", "0.05")[0] == 1
    assert run(tmp_path, "sweep", "--kp", "0.2", "--ki", "0.05", "--loop", "inner:boilers")[0] == 1


def test_outer_sweep(tmp_path):
    code, out = run(tmp_path, "sweep", "--loop", "outer", "--kp", "0.15", "--ki", "0.05:0.95:1.0", "--no-plot")
    assert code == 0
    values = [float(r[2]) for r in list(csv.reader((out / "sweep.csv").open()))[1:]]
    assert values[0] < 0 < values[1]


# ---------------------------------------------------------------- stability, bode, montecarlo, schedule

def test_stability_benchmark(tmp_path, capsys):
    code, out = run(tmp_path, "stability", "--benchmark", "hayes")
    assert code == 0
    assert "index = -0.3181" in capsys.readouterr().out
    data = json.loads((out / "stability.json").read_text())
    assert data["rightmost"]["im"] == pytest.approx(1.33724, abs=1e-5)
    check_manifest(out)


def test_stability_of_default_system(tmp_path):
    code, out = run(tmp_path, "stability")
    assert code == 0
    assert json.loads((out / "stability.json").read_text())["stable"] is True


def test_bode_sweep(tmp_path):
    code, out = run(tmp_path, "bode", "--taus", "0:2:10", "--no-plot")
    assert code == 0
    rows = list(csv.DictReader((out / "margins.csv").open()))
    assert [float(r["tau"]) for r in rows] == [0, 2, 4, 6, 8, 10]
    assert rows[0]["gain_margin"] == "inf"
    pm = [float(r["phase_margin"]) for r in rows]
    assert pm == sorted(pm, reverse=True)


def test_montecarlo_without_spread_gives_identical_rows(tmp_path):
    code, out = run(tmp_path, "montecarlo", "--n", "10", "--pct", "0", "--seed", "7", "--no-plot")
    assert code == 0
    rows = (out / "montecarlo.csv").read_text().splitlines()[1:]
    assert len(rows) == 10
    assert len({r.split(",", 1)[1] for r in rows}) == 1
    summary = json.loads((out / "montecarlo.json").read_text())
    assert summary["seed"] == 7 and summary["stable_fraction"] == 1.0


def test_schedule_default_fleet(tmp_path):
    code, out = run(tmp_path, "schedule", "--fleet", "default", "--target", "55", "--q", "0")
    assert code == 0
    data = json.loads((out / "schedule.json").read_text())
    assert data["objective"] <= 55.0 + 1e-9
    assert data["objective"] == pytest.approx(55.0, abs=1e-9)


def test_schedule_infeasible_exits_2(tmp_path, capsys):
    assert run(tmp_path, "schedule", "--target", "1")[0] == 2
    assert "by 3 kW" in capsys.readouterr().err


def test_schedule_missing_fleet_exits_1(tmp_path):
    assert run(tmp_path, "schedule", "--fleet", str(tmp_path / "none.json"), "--target", "5")[0] == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "drflex", "stability", "--benchmark", "boundary",
                          "--out", str(tmp_path / "o")], capture_output=True, text=True, check=False)
    assert res.returncode == 0, res.stderr
    index = float(res.stdout.split("index = ")[1].split()[0])
    assert abs(index) < 1e-6
