import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from fluxtheo import cli

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCEN = os.path.join(ROOT, "scenarios")


def scenario(name):
    return os.path.join(SCEN, name)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_fmt_round_trips_floats():
    for x in (np.pi, 1 / 3, 2.34e-3, -1e-300, 123456789.123456789):
        s = cli.fmt(x)
        assert float(s) == x
    assert cli.fmt(np.float64(0.1)) == "0.10000000000000001"
    assert cli.fmt(True) == "true"
    assert cli.fmt(np.int64(3)) == "3"


def test_validate_good_and_bad(tmp_path, capsys):
    assert cli.main(["validate", scenario("closed_system.json")]) == 0
    assert cli.main(["validate", scenario("bad_kraus.json")]) == 2
    out = capsys.readouterr().out
    assert "trace preserving" in out


def test_run_bad_scenario_exit_code(tmp_path):
    assert cli.main(["run", scenario("bad_kraus.json"), "--out", str(tmp_path)]) == 2


def test_missing_and_malformed_inputs(tmp_path):
    assert cli.main(["validate", str(tmp_path / "nope.json")]) == 2
    p = tmp_path / "v.json"
    p.write_text(json.dumps({"version": "other/9", "protocol": {}}))
    assert cli.main(["validate", str(p)]) == 2
    p.write_text(json.dumps({"version": "fluxtheo/1", "protocol": {}, "anneal": {}}))
    assert cli.main(["validate", str(p)]) == 2
    p.write_text("{not json")
    assert cli.main(["validate", str(p)]) == 2
    assert cli.main(["run", scenario("closed_system.json"), "--ode-tol", "-1"]) == 2
    assert cli.main(["run", scenario("closed_system.json"), "--threads", "0"]) == 2


def test_run_closed_system(tmp_path):
    assert cli.main(["run", scenario("closed_system.json"), "--out", str(tmp_path)]) == 0
    summary = dict(read_rows(tmp_path / "protocol_summary.csv")[1:])
    assert float(summary["gamma_closed"]) == pytest.approx(1.0, abs=1e-14)
    assert float(summary["jarzynski_residual"]) < 1e-14
    pdf = read_rows(tmp_path / "protocol_pdf.csv")
    assert pdf[0] == ["v", "probability"]
    # 17 significant digits on every float
    for v, _ in pdf[1:]:
        assert float(v) == float(f"{float(v):.17g}")
    mgf = read_rows(tmp_path / "protocol_mgf.csv")
    assert all(float(r[3]) < 1e-9 for r in mgf[1:])


def test_run_pair_and_feedback(tmp_path):
    assert cli.main(["run", scenario("microreversible_pair.json"), "--out", str(tmp_path)]) == 0
    summary = dict(read_rows(tmp_path / "protocol_summary.csv")[1:])
    assert float(summary["crooks_residual"]) < 1e-10
    assert cli.main(["run", scenario("feedback.json"), "--out", str(tmp_path)]) == 0
    fsum = dict(read_rows(tmp_path / "feedback_summary.csv")[1:])
    assert float(fsum["information_integral"]) == pytest.approx(1.0, abs=1e-10)
    assert float(fsum["jarzynski_residual"]) < 1e-10


def test_run_short_anneal(tmp_path):
    sc = {"version": "fluxtheo/1", "anneal": {"n_qubits": 2, "h": [1 / 3, 1 / 3], "J": [[0, 1, 0.5]],
                                              "t_f_us": 0.2, "time_series": True}}
    p = tmp_path / "a.json"
    p.write_text(json.dumps(sc))
    assert cli.main(["run", str(p), "--out", str(tmp_path), "--ode-tol", "1e-6"]) == 0
    tm = json.loads((tmp_path / "transition_matrix.json").read_text())
    assert np.allclose(tm["column_sums"], 1.0, atol=1e-6)
    summary = dict(read_rows(tmp_path / "anneal_summary.csv")[1:])
    assert float(summary["qje_residual"]) < 1e-10
    ts = read_rows(tmp_path / "time_series.csv")
    assert ts[0] == ["t_us", "level", "population", "trace_residual"]
    assert float(ts[-1][0]) == pytest.approx(0.2)


def test_anneal_bad_sweep_key(tmp_path):
    sc = {"version": "fluxtheo/1", "anneal": {"n_qubits": 2, "h": [0.3, 0.3], "J": [[0, 1, 0.5]],
                                              "t_f_us": 1.0, "sweep": {"key": "beta", "values": [1]}}}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc))
    assert cli.main(["validate", str(p)]) == 2


def test_fit_command_single_point(tmp_path, capsys):
    data = tmp_path / "counts.csv"
    data.write_text("J,t_f_us,state_label,count\n0.0,0.5,00,999000\n0.0,0.5,01,500\n"
                    "0.0,0.5,10,500\n0.0,0.5,11,0\n")
    rc = cli.main(["fit", str(data), "--kappa-range", "1e-3", "5e-3", "--per-decade", "4",
                   "--ode-tol", "1e-6", "--out", str(tmp_path), "--threads", "1"])
    assert rc == 0
    rep = json.loads((tmp_path / "fit_report.json").read_text())
    assert rep["underdetermined"] is True
    assert "under-determined" in capsys.readouterr().out
    assert read_rows(tmp_path / "msd_curve.csv")[0] == ["kappa", "msd"]


def test_fit_missing_data(tmp_path):
    assert cli.main(["fit", str(tmp_path / "none.csv")]) == 2


def test_selftest_quick_console_script(tmp_path):
    t0 = time.perf_counter()
    r = subprocess.run([sys.executable, "-m", "fluxtheo.cli", "selftest", "--quick", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    dt = time.perf_counter() - t0
    lines = [ln for ln in r.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) == 7
    res = json.loads((tmp_path / "selftest.json").read_text())
    assert {x["number"] for x in res} == {1, 2, 3, 4, 5, 6, 10}
    # criterion 10 carries the beta = 0 witness check, which fails by construction of the rates
    failed = {x["number"] for x in res if not x["passed"]}
    assert failed <= {10}
    assert r.returncode == (3 if failed else 0)
    assert dt < 60


def test_selftest_controlled_failure():
    assert cli.main(["selftest", "--criteria", "1", "--tol-scale", "1e-30"]) == 3
    assert cli.main(["selftest", "--criteria", "1"]) == 0
    assert cli.main(["selftest", "--criteria", "42"]) == 2
