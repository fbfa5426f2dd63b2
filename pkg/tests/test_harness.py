import json
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac.bootstrap import ConfigError, ExperimentConfig
from modac.checkpoint import CheckpointError
from modac.harness import (METRICS_FILE, SUMMARY_FILE, RunRecord, RunRecordError, area_under_curve,
                           average_curves, load_trained, option_selection_fraction, read_csv, read_metrics, sweep,
                           train_phase, transfer_auc_with_training, transfer_phase)


def tiny_config(agent="modac", **overrides):
    data = {
        "experiment": {"name": f"tiny_{agent}", "agent": agent, "seed": 0, "seeds": [0]},
        "env": {"max_steps": 10, "test_goals": [[1, 10], [8, 9]]},
        "agent": {"num_options": 2, "num_actors": 2, "n_step": 5, "inner_steps": 2},
        "network": {"torso": "mlp", "mlp_hidden": [8]},
        "budget": {"train_frames": 150, "transfer_frames": 60, "log_every_frames": 30, "usage_every_frames": 60},
    }
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        data[section][key] = value
    return ExperimentConfig.from_dict(data)


def test_area_under_curve_is_average_return():
    rows = [{"frames": 0.0, "episode_return_mean": 0.0}, {"frames": 10.0, "episode_return_mean": 1.0},
            {"frames": 20.0, "episode_return_mean": 1.0}]
    assert area_under_curve(rows) == pytest.approx(0.75)
    assert np.isnan(area_under_curve([{"frames": 5.0, "episode_return_mean": float("nan")}]))


def test_auc_with_training_spreads_over_training_frames():
    rows = [{"frames": 0.0, "episode_return_mean": 1.0}, {"frames": 10.0, "episode_return_mean": 1.0}]
    assert transfer_auc_with_training(rows, 0) == pytest.approx(1.0)
    assert transfer_auc_with_training(rows, 30) == pytest.approx(0.25)


def test_average_curves_sem_across_tasks():
    a = [{"frames": 10.0, "episode_return_mean": 1.0, "episode_return_sem": 0.5, "option_frac": 0.2}]
    b = [{"frames": 10.0, "episode_return_mean": 3.0, "episode_return_sem": 0.1, "option_frac": float("nan")}]
    (row,) = average_curves([a, b], ["frames", "episode_return_mean", "episode_return_sem", "option_frac"])
    assert row["episode_return_mean"] == pytest.approx(2.0)
    assert row["episode_return_sem"] == pytest.approx(1.0)
    assert row["option_frac"] == pytest.approx(0.2)


def test_option_selection_fraction():
    rows = [{"choice_hist_0": 0.25, "choice_hist_1": 0.25, "choice_hist_2": 0.5}]
    assert option_selection_fraction(rows, 2) == pytest.approx(0.5)


def test_train_then_transfer(tmp_path):
    cfg = tiny_config()
    train = train_phase(cfg, tmp_path)
    assert train.run_dir == str(tmp_path / "tiny_modac" / "seed_0" / "train")
    train.verify()
    rows = read_metrics(train.metrics["train"])
    assert rows[-1]["frames"] == train.frames
    assert train.final_checkpoint.endswith("final")
    params, metadata = load_trained(train.final_checkpoint)
    assert metadata["kind"] == "modac" and metadata["num_options"] == 2
    assert params.rewards is not None
    _, snapshots = read_csv(train.usage)
    for row in snapshots:
        hist = [float(v) for key, v in row.items() if key.startswith("choice_hist_")]
        assert len(hist) == 2 + 4
        if float(row["decisions"]) > 0:
            assert sum(hist) == pytest.approx(1.0)

    transfer = transfer_phase(cfg, train.final_checkpoint, tmp_path)
    transfer.verify()
    assert set(transfer.metrics) == {"task0", "task1", "average"}
    assert transfer.summary["num_tasks"] == 2
    assert transfer.summary["train_frames"] == train.frames
    assert np.isfinite(transfer.summary["transfer_auc"])
    columns, usage = read_csv(transfer.usage)
    assert columns[0] == "task" and {row["task"] for row in usage} == {"0", "1"}
    # the frozen options are the trained ones
    option_map = read_csv(transfer.artifacts["option_map"])[1]
    train_map = read_csv(train.artifacts["option_map"])[1]
    assert option_map == train_map

    loaded = RunRecord.load(transfer.run_dir)
    assert loaded.summary == pytest.approx(transfer.summary, nan_ok=True)


def test_transfer_rejects_mismatched_checkpoint(tmp_path):
    train = train_phase(tiny_config(), tmp_path)
    with pytest.raises(CheckpointError):
        transfer_phase(tiny_config(**{"agent.num_options": 3}), train.final_checkpoint, tmp_path)
    with pytest.raises(CheckpointError):
        transfer_phase(tiny_config("mlsh"), train.final_checkpoint, tmp_path)


def test_modac_without_options_transfers(tmp_path):
    cfg = tiny_config(**{"agent.num_options": 0})
    train = train_phase(cfg, tmp_path)
    params, metadata = load_trained(train.final_checkpoint)
    assert metadata["num_options"] == 0 and params.options is None
    transfer = transfer_phase(cfg, train.final_checkpoint, tmp_path)
    transfer.verify()
    assert transfer.summary["num_tasks"] == 2
    assert transfer.summary["option_selection_frac"] == 0.0
    assert "option_map" not in transfer.artifacts


def test_transfer_without_checkpoint_needs_flat(tmp_path):
    with pytest.raises(CheckpointError):
        transfer_phase(tiny_config(), None, tmp_path)
    record = transfer_phase(tiny_config("flat"), None, tmp_path)
    header = (tmp_path / "tiny_flat" / "seed_0" / "transfer" / METRICS_FILE).read_text().splitlines()[0]
    assert header.endswith(",baseline")
    assert record.summary["option_selection_frac"] == 0.0
    assert "option_map" not in record.artifacts


def test_run_record_verify_reports_missing_files(tmp_path):
    record = RunRecord("train", "modac", str(tmp_path), "x", 0, 10, metrics={"train": str(tmp_path / "gone.csv")})
    with pytest.raises(RunRecordError):
        record.verify()
    with pytest.raises(RunRecordError):
        RunRecord.load(tmp_path / "nope")


def test_sweep_rows_and_summary(tmp_path):
    cfg = tiny_config(**{"budget.train_frames": 60, "budget.transfer_frames": 30})
    rows = sweep(cfg, "agent.switching_cost", [0.0, 0.05], seeds=[0], output=tmp_path, reference=0.0)
    assert len(rows) == 2 * 1 + 2
    runs = [r for r in rows if r["row"] == "run"]
    aggregates = [r for r in rows if r["row"] == "aggregate"]
    assert [r["value"] for r in aggregates] == ["0.0", "0.05"]
    assert aggregates[0]["auc_diff_vs_reference"] == pytest.approx(0.0)
    assert all(r["agent"] == "modac" for r in runs)
    sweep_dir = tmp_path / "tiny_modac__sweep_agent-switching_cost"
    columns, written = read_csv(sweep_dir / SUMMARY_FILE)
    assert columns[0] == "row" and len(written) == 4
    report = json.loads((sweep_dir / "sweep_report.json").read_text())
    assert len(report) == 2


def test_sweep_validates_inputs(tmp_path):
    with pytest.raises(ConfigError):
        sweep(tiny_config(), "agent.switching_cost", [], output=tmp_path)
    with pytest.raises(ConfigError):
        sweep(tiny_config(), "agent.switching_cost", [0.1], output=tmp_path, reference=0.5)
    with pytest.raises(ConfigError):
        sweep(tiny_config(), "agent.no_such_key", [1], output=tmp_path)
