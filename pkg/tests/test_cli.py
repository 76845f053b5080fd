import csv
import json

import pytest

from fedalign.cli import main

SMALL = {"rounds": 2, "n_clients": 6, "synthetic": {"n_train": 300, "n_test": 100}}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_run_ok(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "3",
                 "--defense", "rfa", "--attack", "ada_a"]) == 0
    meta = json.loads((out / "run.json").read_text())
    assert meta["config"]["defense"] == "rfa" and meta["config"]["seed"] == 3
    assert meta["config"]["attack"]["kind"] == "ada_a"
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0][:3] == ["round", "ma", "ba"] and len(rows) == 4
    assert json.loads(capsys.readouterr().out)["ba"] is None


def test_bad_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"rounds": 2, "colour": "red"}))
    assert main(["run", "--config", str(path)]) == 2
    assert "colour" in capsys.readouterr().err


def test_bad_override_exit_2(config):
    assert main(["run", "--config", str(config), "--defense", "median"]) == 2


def test_missing_file_exit_3(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 3
    assert "nope.json" in capsys.readouterr().err


def test_missing_dataset_exit_3(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset": "mnist", "data_dir": str(tmp_path / "empty")}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 3


def test_sweep(config, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config), "--out", str(out), "--attacks", "none,ada_b",
                 "--defenses", "fedavg,alignins", "--betas", "iid,0.5"]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 8 * 3
    assert {(r["attack"], r["defense"], r["beta"]) for r in rows} == {
        (a, d, b) for a in ("none", "ada_b") for d in ("fedavg", "alignins") for b in ("iid", "0.5")}


def test_sweep_bad_beta_exit_2(config, tmp_path):
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path), "--betas", "-1"]) == 2


def test_kappa_check(tmp_path, capsys):
    out = tmp_path / "k.json"
    assert main(["kappa-check", "--trials", "30", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["violations"] == 0
    assert len(json.loads(out.read_text())["per_trial"]) == 30


def test_kappa_check_failure_exit_1():
    # radii of zero keep almost nobody, so the precondition fails in most trials
    assert main(["kappa-check", "--trials", "20", "--radius", "0"]) == 1
