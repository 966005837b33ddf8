import csv
import json
import math

import numpy as np
import pytest

from cdkf_sched.cli import main, read_csv
from cdkf_sched.scenarios import load_config


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _write_rates(path, nodes, rates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "t_start", "t_end"] + [f"lambda_{s + 1}" for s in range(len(rates))])
        for k in range(len(nodes) - 1):
            w.writerow([k, nodes[k], nodes[k + 1], *[r[k] for r in rates]])


@pytest.fixture(scope="module")
def water_plan(tmp_path_factory):
    out = tmp_path_factory.mktemp("water")
    code = main(["plan", "--config", "water", "--out", str(out)])
    return code, out


def test_plan_water_shapes(water_plan):
    code, out = water_plan
    assert code == 0
    header, data = read_csv(out / "rates.csv")
    assert header[-2:] == ["lambda_1", "lambda_2"]
    assert data.shape == (59, 5)
    diag = json.loads((out / "solve.json").read_text())
    assert diag["converged"] and diag["max_violation"] <= 1e-6
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "plan" and manifest["scenario"] == "water"


def test_plan_respects_fouling_cap(water_plan):
    _, out = water_plan
    header, data = read_csv(out / "bound.csv")
    cap = load_config("water")["c_xi"]
    for name in ("fouling_1", "fouling_2"):
        assert data[:, header.index(name)].max() <= cap + 1e-6


def test_schedule_round_trip_counts(water_plan, tmp_path):
    _, out = water_plan
    assert main(["schedule", "--rates", str(out / "rates.csv"), "--out", str(tmp_path)]) == 0
    _, rates = read_csv(out / "rates.csv")
    rows = _rows(tmp_path / "schedule.csv")[1:]
    for s in (1, 2):
        mass = float(np.sum((rates[:, 2] - rates[:, 1]) * rates[:, 2 + s]))
        assert sum(int(r[0]) == s for r in rows) == math.floor(mass + 0.5)


def test_schedule_constant_rate_midpoints(tmp_path):
    _write_rates(tmp_path / "rates.csv", [0.0, 1.0, 2.0, 3.0], [[2.0, 2.0, 2.0], [0.0, 0.0, 0.0]])
    assert main(["schedule", "--rates", str(tmp_path / "rates.csv"), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "schedule.csv")
    assert rows[0] == ["sensor", "time"]
    assert [int(r[0]) for r in rows[1:]] == [1] * 6
    np.testing.assert_allclose([float(r[1]) for r in rows[1:]], [0.25, 0.75, 1.25, 1.75, 2.25, 2.75], atol=1e-12)


def test_schedule_all_zero_rates_gives_header_only(tmp_path):
    _write_rates(tmp_path / "rates.csv", [0.0, 0.5, 1.0], [[0.0, 0.0]])
    assert main(["schedule", "--rates", str(tmp_path / "rates.csv"), "--out", str(tmp_path)]) == 0
    assert _rows(tmp_path / "schedule.csv") == [["sensor", "time"]]


def test_malformed_inputs_exit_1(tmp_path, capsys):
    (tmp_path / "rates.csv").write_text("interval,t_start\n0,zero\n")
    assert main(["schedule", "--rates", str(tmp_path / "rates.csv"), "--out", str(tmp_path)]) == 1
    assert main(["plan", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_simulate_is_deterministic(tmp_path):
    sched = tmp_path / "schedule.csv"
    sched.write_text("sensor,time\n1,0.2\n1,0.5\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["simulate", "--config", "scalar", "--schedule", str(sched), "--seed", "5",
                     "--out", str(out)]) == 0
        outs.append(out)
    for name in ("truth.csv", "filter.csv", "smooth.csv", "stats.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_simulate_without_schedule_is_pure_prediction(tmp_path):
    assert main(["simulate", "--config", "scalar", "--out", str(tmp_path)]) == 0
    header, data = read_csv(tmp_path / "filter.csv")
    cfg = load_config("scalar")
    assert data[:, header.index("updated")].sum() == 0
    t = data[:, header.index("t")]
    np.testing.assert_allclose(data[:, header.index("trace")], cfg["Sigma_0"] + cfg["sigma2"] * t, atol=1e-10)


def test_simulate_robot_energy_jumps(tmp_path):
    sched = tmp_path / "schedule.csv"
    sched.write_text("sensor,time\n1,0.3\n2,0.6\n")
    assert main(["simulate", "--config", "robot", "--schedule", str(sched), "--out", str(tmp_path)]) == 0
    header, data = read_csv(tmp_path / "truth.csv")
    cfg = load_config("robot")
    eta, ev = data[:, header.index("eta")], data[:, header.index("event_sensor")]
    hits = np.flatnonzero(ev > 0)
    assert len(hits) == 2
    for i in hits:
        assert eta[i] - eta[i - 1] == pytest.approx(-cfg[f"c_{int(ev[i])}"], abs=1e-12)


def test_verify_single_replication_reports(tmp_path):
    grid = np.linspace(0.0, 1.0, 50)
    _write_rates(tmp_path / "rates.csv", grid, [np.full(49, 2.0)])
    code = main(["verify", "--config", "scalar", "--rates", str(tmp_path / "rates.csv"), "--reps", "1",
                 "--out", str(tmp_path)])
    assert code in (0, 2)
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["replications"] == 1 and len(report["nodes"]) == 50
    assert isinstance(report["pass"], bool)


def test_verify_grid_mismatch_is_input_error(tmp_path):
    _write_rates(tmp_path / "rates.csv", [0.0, 0.5, 1.0], [[1.0, 1.0]])
    assert main(["verify", "--config", "scalar", "--rates", str(tmp_path / "rates.csv"), "--reps", "2",
                 "--out", str(tmp_path)]) == 1


def test_verify_refuses_state_dependent_noise(tmp_path):
    cfg = load_config("robot_radiation")
    grid = np.linspace(0.0, cfg["T"], cfg["N"])
    _write_rates(tmp_path / "rates.csv", grid, [np.ones(cfg["N"] - 1)] * 2)
    code = main(["verify", "--config", "robot_radiation", "--rates", str(tmp_path / "rates.csv"), "--reps", "4",
                 "--out", str(tmp_path)])
    assert code == 3


def test_compare_is_deterministic(tmp_path):
    args = ["compare", "--config", "scalar", "--grid-n", "11", "--reps", "2", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "compare.csv").read_bytes()
    assert a == (tmp_path / "b" / "compare.csv").read_bytes()
    methods = {r[0] for r in _rows(tmp_path / "a" / "compare.csv")[1:]}
    assert methods == {"Optimized", "M-Optimized", "Greedy", "Random"}


def test_gp_demo(tmp_path):
    assert main(["gp-demo", "--n", "8", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "gp_demo.json").read_text())
    assert max(r["max_mean_deviation"] for r in res) < 1e-8
