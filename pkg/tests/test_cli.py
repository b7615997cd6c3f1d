"""End-to-end command line behavior, exercised in process via main(argv)."""

import json
import subprocess
import sys

import numpy as np
import pytest

from jsam import config
from jsam.cli import main
from jsam.mechanism import verify_structure

SMALL_SIM = {
    "clients": 3,
    "costs": {"kind": "uniform", "lower": 0.1, "upper": 1.0},
    "server": {"eta": 1.0, "q_coefficient": 1.0, "grid_delta": 1e-2},
    "train": {"rounds": 8, "per_round": 2},
    "task": {"feature_dim": 4, "classes": 3, "samples_per_client": 12,
             "test_size": 30},
    "mechanisms": ["jsam"],
    "seeds": [0],
    "payment_grid": 30,
}


def _write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _solve_json(tmp_path, doc, extra=()):
    path = _write_cfg(tmp_path, doc)
    out = tmp_path / "solve.json"
    rc = main(["solve", "--config", path, "--out", str(out), *extra])
    assert rc == 0
    return json.loads(out.read_text())


# ---------------------------------------------------------------------------
# solve


def test_solve_single_client_takes_everything(tmp_path):
    doc = dict(SMALL_SIM, clients=1, sensitivities=[0.4])
    got = _solve_json(tmp_path, doc)
    assert got["probabilities"] == [1.0]
    assert got["selected_count"] == 1
    assert got["sensitivities"] == [0.4]
    spend = sum(v * e for v, e in
                zip(got["virtual_costs"], got["privacy_budgets"]))
    assert spend == pytest.approx(got["total_budget"], rel=1e-9)


def test_solve_output_respects_the_selection_structure(tmp_path):
    doc = dict(SMALL_SIM, clients=10)
    got = _solve_json(tmp_path, doc)
    p = np.array(got["probabilities"])
    order = np.argsort(np.array(got["virtual_costs"]), kind="stable") + 1
    report = verify_structure(p, order, tol=1e-2 + 1e-9)
    assert report.passed, report.clause
    # the grid can zero out the threshold client exactly, shifting the
    # inferred threshold down by one
    assert got["threshold"] in (report.threshold, report.threshold + 1)
    assert got["selected_count"] == int(np.sum(p > 0))


def test_solve_writes_to_stdout_without_out(tmp_path, capsys):
    path = _write_cfg(tmp_path, dict(SMALL_SIM, clients=2))
    assert main(["solve", "--config", path]) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["mechanism"] == "jsam"
    assert len(got["probabilities"]) == 2


def test_seed_flag_changes_the_sampled_costs(tmp_path):
    a = _solve_json(tmp_path, SMALL_SIM, extra=("--seed", "0"))
    b = _solve_json(tmp_path, SMALL_SIM, extra=("--seed", "1"))
    assert a["sensitivities"] != b["sensitivities"]
    assert b["seed"] == 1


def test_objective_form_flag_is_threaded_through(tmp_path):
    got = _solve_json(tmp_path, SMALL_SIM,
                      extra=("--objective-form", "paper_literal"))
    assert got["objective_form"] == "paper_literal"
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--config", "x", "--objective-form", "bogus"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# config errors


def test_negative_eta_is_a_config_error(tmp_path, capsys):
    doc = dict(SMALL_SIM, server={"eta": -1.0, "q_coefficient": 1.0})
    path = _write_cfg(tmp_path, doc)
    assert main(["solve", "--config", path]) == 2
    assert "eta" in capsys.readouterr().err


def test_unknown_config_field_is_named(tmp_path, capsys):
    path = _write_cfg(tmp_path, dict(SMALL_SIM, path="/tmp/x"))
    assert main(["solve", "--config", path]) == 2
    assert "path" in capsys.readouterr().err


def test_malformed_json_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["solve", "--config", str(path)]) == 2
    assert "JSON" in capsys.readouterr().err


def test_bare_fsbm_is_rejected(tmp_path, capsys):
    path = _write_cfg(tmp_path, SMALL_SIM)
    assert main(["solve", "--config", path, "--mechanism", "fsbm"]) == 2
    assert "fsbm" in capsys.readouterr().err


def test_missing_config_is_an_error(capsys):
    assert main(["solve"]) == 2
    assert "config" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# simulate


def test_simulate_is_byte_deterministic(tmp_path):
    doc = dict(SMALL_SIM, mechanisms=["jsam", "usbm"], seeds=[0, 1])
    path = _write_cfg(tmp_path, doc)
    out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", path, "--out", str(out_a)]) == 0
    assert main(["simulate", "--config", path, "--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()


def test_simulate_row_shape_and_cost_column(tmp_path):
    doc = dict(SMALL_SIM, mechanisms=["jsam", "usbm"], seeds=[0, 1])
    path = _write_cfg(tmp_path, doc)
    out = tmp_path / "runs.csv"
    assert main(["simulate", "--config", path, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ("run_id,mechanism,seed,s,eta,round,train_loss,"
                        "test_loss,test_accuracy,cumulative_monetary_cost")
    assert len(lines) == 1 + 2 * 2 * 8
    solved = _solve_json(tmp_path, SMALL_SIM)
    for line in lines[1:]:
        parts = line.split(",")
        assert len(parts) == 10
        float(parts[6]), float(parts[7]), float(parts[8])
        if parts[1] == "jsam" and parts[2] == "0":
            assert parts[0] == "jsam-s100-eta1-seed0"
            assert float(parts[9]) == solved["total_payment"]


def test_simulate_rejects_eta_zero(tmp_path, capsys):
    doc = dict(SMALL_SIM, server={"eta": 0.0, "q_coefficient": 1.0})
    path = _write_cfg(tmp_path, doc)
    assert main(["simulate", "--config", path]) == 2
    assert "eta" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep


def test_sweep_header_rows_and_solve_consistency(tmp_path):
    doc = dict(SMALL_SIM, eta_grid=[0.5, 2.0])
    path = _write_cfg(tmp_path, doc)
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", path, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ("eta,mechanism,seed,total_budget,total_payment,"
                        "selected_count,final_test_accuracy,final_test_loss")
    assert len(lines) == 3
    row = lines[1].split(",")
    assert float(row[0]) == 0.5 and row[1] == "jsam" and row[2] == "0"
    point = _solve_json(tmp_path, dict(
        SMALL_SIM, server={"eta": 0.5, "q_coefficient": 1.0,
                           "grid_delta": 1e-2}))
    assert float(row[3]) == pytest.approx(point["total_budget"], rel=1e-12)
    assert float(row[4]) == pytest.approx(point["total_payment"], rel=1e-12)
    assert int(row[5]) == point["selected_count"]


def test_sweep_without_grid_is_a_config_error(tmp_path, capsys):
    path = _write_cfg(tmp_path, SMALL_SIM)
    assert main(["sweep", "--config", path]) == 2
    assert "eta_grid" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# audit


def test_audit_default_config_passes(capsys):
    assert main(["audit"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6
    assert all(line.startswith("ok:") for line in out)


def test_audit_refuses_large_instances(tmp_path, capsys):
    path = _write_cfg(tmp_path, dict(SMALL_SIM, clients=10))
    assert main(["audit", "--config", path]) == 2
    assert "4" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config round trips and defaults


def test_config_round_trips_through_json():
    cfg = config.from_dict(SMALL_SIM)
    again = config.from_dict(json.loads(config.dumps(cfg)))
    assert again == cfg


def test_config_defaults_match_the_documented_protocol():
    cfg = config.from_dict({})
    assert cfg.clients == 100
    assert cfg.train.rounds == 1000
    assert cfg.train.per_round == 10
    assert cfg.train.clip == 6.0
    assert cfg.train.delta == 1e-5
    assert cfg.costs.kind == "uniform"
    config.validate(cfg)


def test_module_entry_point(tmp_path):
    path = _write_cfg(tmp_path, dict(SMALL_SIM, clients=2))
    proc = subprocess.run(
        [sys.executable, "-m", "jsam", "solve", "--config", path],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    got = json.loads(proc.stdout)
    assert len(got["probabilities"]) == 2
