"""CLI contract: exit codes, run-directory artifacts, report schemas, and
determinism of the train/eval pipeline."""

import csv
import json
import os

import numpy as np
import pytest

from kinoplan.cli import main
from kinoplan.config import ExperimentConfig, smoke_config
from kinoplan.errors import ConfigError


def _write_config(tmp_path, seed=0, **overrides):
    cfg = smoke_config(seed, **overrides)
    path = tmp_path / "config.json"
    path.write_text(cfg.resolved_json())
    return path


TINY_TRAIN = {"iterations": 3, "num_envs": 2, "steps_per_iteration": 60,
              "checkpoint_every": 2, "save_resume_state": False}


def test_missing_required_field_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"run_tag": "x"}))
    code = main(["train", "--config", str(path)])
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_unknown_field_exits_2_with_name(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seed": 1, "planner": {"wat": 3}}))
    code = main(["train", "--config", str(path)])
    assert code == 2
    assert "planner.wat" in capsys.readouterr().err


def test_train_creates_run_directory(tmp_path):
    cfg_path = _write_config(tmp_path, train=TINY_TRAIN)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    files = os.listdir(out)
    assert "metrics.jsonl" in files
    assert "config.json" in files
    assert any(f.startswith("checkpoint_") for f in files)
    # resolved config reloads to an identical object
    reloaded = ExperimentConfig.load(out / "config.json")
    assert reloaded.resolved_json() == smoke_config(0, train=TINY_TRAIN).resolved_json()


def test_same_seed_twice_identical_metrics(tmp_path):
    cfg_path = _write_config(tmp_path, seed=9, train=TINY_TRAIN)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        outs.append((out / "metrics.jsonl").read_bytes())
    assert outs[0] == outs[1]


@pytest.fixture(scope="module")
def trained_checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("agent")
    cfg = smoke_config(5, train=TINY_TRAIN)
    (tmp / "config.json").write_text(cfg.resolved_json())
    out = tmp / "run"
    assert main(["train", "--config", str(tmp / "config.json"),
                 "--out", str(out)]) == 0
    return str(out / "checkpoint_final.kpt")


def test_eval_report_rows_and_schema(tmp_path, trained_checkpoint):
    out = tmp_path / "eval"
    code = main(["eval", "--checkpoint", trained_checkpoint,
                 "--mode", "policy_only,planner,planner_no_bootstrap",
                 "--terrains", "flat,gap", "--levels", "0,1", "--seeds", "0",
                 "--episodes", "1", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["rows"]) == 2 * 2 * 3  # terrains x levels x modes
    for row in report["rows"]:
        assert row["sample_count"] == 1
        assert "success_rate" in row and "mean_return" in row
        if row["mode"].startswith("planner"):
            assert "violation_count" in row
    with open(out / "report.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(report["rows"])
    traces = [json.loads(line) for line in
              (out / "planner_traces.jsonl").read_text().splitlines()]
    assert traces and all(t["schema_version"] == 1 for t in traces)


def test_eval_deterministic_given_seed(tmp_path, trained_checkpoint):
    reports = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        main(["eval", "--checkpoint", trained_checkpoint, "--mode", "planner",
              "--terrains", "flat", "--levels", "0", "--seeds", "3",
              "--episodes", "1", "--out", str(out)])
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1]


def test_trace_columns(tmp_path, trained_checkpoint):
    out = tmp_path / "tr"
    code = main(["trace", "--checkpoint", trained_checkpoint, "--terrain", "flat",
                 "--level", "0", "--seed", "1", "--out", str(out)])
    assert code == 0
    files = [f for f in os.listdir(out) if f.endswith(".csv")]
    assert len(files) == 1
    with open(out / files[0]) as f:
        rows = list(csv.reader(f))
    horizon = smoke_config(5).planner.horizon
    assert len(rows[0]) == horizon + 2
    assert rows[0][0] == "t" and rows[0][-1] == "actual_pz"
    assert len(rows) > 1


def test_checkpoint_mismatch_exits_3(tmp_path, trained_checkpoint):
    bad = tmp_path / "bad.kpt"
    raw = open(trained_checkpoint, "rb").read()
    bad.write_bytes(raw.replace(b'"format_version": 1', b'"format_version": 4', 1))
    code = main(["eval", "--checkpoint", str(bad), "--mode", "policy_only",
                 "--terrains", "flat", "--levels", "0", "--seeds", "0",
                 "--episodes", "1", "--out", str(tmp_path / "e")])
    assert code == 3


def test_not_a_checkpoint_exits_3(tmp_path):
    bogus = tmp_path / "x.kpt"
    bogus.write_bytes(b"not a checkpoint\n")
    code = main(["eval", "--checkpoint", str(bogus), "--mode", "policy_only",
                 "--terrains", "flat", "--levels", "0", "--seeds", "0",
                 "--episodes", "1", "--out", str(tmp_path / "e")])
    assert code == 3


def test_out_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("KINOPLAN_OUT_ROOT", str(tmp_path / "root"))
    cfg_path = _write_config(tmp_path, seed=1,
                             train={**TINY_TRAIN, "iterations": 1})
    assert main(["train", "--config", str(cfg_path)]) == 0
    runs = os.listdir(tmp_path / "root")
    assert len(runs) == 1 and runs[0].startswith("smoke_s1")
