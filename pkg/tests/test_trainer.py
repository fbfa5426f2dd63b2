import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac.bootstrap import ExperimentConfig
from modac.harness import metrics_equal, write_metrics
from modac.trainer import (FlatLearner, MetricsWindow, MlshLearner, ModacLearner, OptionCriticLearner,
                           algorithm1_driver, make_learner, metric_columns)


def tiny_config(**overrides):
    data = {
        "experiment": {"name": "tiny", "agent": "modac", "seed": 0},
        "env": {"max_steps": 30},
        "agent": {"num_options": 2, "num_actors": 2, "n_step": 5, "inner_steps": 2},
        "network": {"torso": "mlp", "mlp_hidden": [8]},
        "budget": {"train_frames": 200, "transfer_frames": 100, "log_every_frames": 50, "usage_every_frames": 100},
    }
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        data.setdefault(section, {})[key] = value
    return ExperimentConfig.from_dict(data)


def test_metric_columns_layout():
    cols = metric_columns(6)
    assert cols[:5] == ["frames", "episode_return_mean", "episode_return_sem", "option_frac", "mean_option_len"]
    assert cols[5:11] == [f"choice_hist_{i}" for i in range(6)]
    assert cols[-3:] == ["meta_grad_norm", "loss_policy", "loss_value"]


def test_empty_window_reports_nan():
    row = MetricsWindow(2, 6).row(0)
    assert np.isnan(row["episode_return_mean"])
    assert np.isnan(row["meta_grad_norm"])
    assert row["option_frac"] == 0.0


def test_make_learner_dispatch():
    assert isinstance(make_learner(tiny_config()), ModacLearner)
    assert isinstance(make_learner(tiny_config(**{"experiment.agent": "flat"})), FlatLearner)
    assert isinstance(make_learner(tiny_config(**{"experiment.agent": "mlsh"})), MlshLearner)
    assert isinstance(make_learner(tiny_config(**{"experiment.agent": "option_critic"})), OptionCriticLearner)


def test_modac_run_spends_budget_and_meta_updates():
    result = algorithm1_driver(tiny_config())
    assert result.frames >= 200
    assert result.frames % 10 == 0
    assert result.rows[-1]["frames"] == result.frames
    assert [r["frames"] for r in result.rows] == sorted(r["frames"] for r in result.rows)
    assert result.meta_updates + result.meta_skips >= 1
    assert set(result.rows[0]) == set(result.columns)
    assert not result.params.options.is_differentiable


def test_frames_count_every_rollout():
    learner = ModacLearner(tiny_config())
    learner.step()
    # two inner rollouts of 2 actors x 5 steps, plus a validation rollout when an update was recorded
    assert learner.frames in (20, 30)
    assert learner.outer_steps == 1


def test_last_step_truncation_runs():
    result = algorithm1_driver(tiny_config(**{"agent.truncation": "last_step"}))
    assert result.frames >= 200


def test_checkpoint_hook_called():
    calls = []
    cfg = tiny_config(**{"budget.checkpoint_every_frames": 100})
    algorithm1_driver(cfg, checkpoint_hook=lambda frames, params: calls.append(frames))
    assert calls and all(f >= 100 for f in calls)


def test_runs_are_reproducible(tmp_path):
    a = algorithm1_driver(tiny_config(), seed=5)
    b = algorithm1_driver(tiny_config(), seed=5)
    assert a.params.rewards.digest() == b.params.rewards.digest()
    first = write_metrics(tmp_path / "a.csv", a, "modac")
    second = write_metrics(tmp_path / "b.csv", b, "modac")
    assert first.read_bytes() == second.read_bytes()


def test_modac_without_options_equals_flat(tmp_path):
    cfg = tiny_config(**{"agent.num_options": 0, "agent.switching_cost": 0.05})
    modac = write_metrics(tmp_path / "modac.csv", ModacLearner(cfg).run(), "modac")
    flat_cfg = cfg.with_override("experiment.agent", "flat")
    flat = write_metrics(tmp_path / "flat.csv", FlatLearner(flat_cfg).run(), "flat")
    assert metrics_equal(modac, flat)
    assert "baseline" in flat.read_text().splitlines()[0]


def test_transfer_freezes_options():
    trained = ModacLearner(tiny_config()).run()
    before = (trained.params.options.digest(), trained.params.terminations.digest())
    learner = ModacLearner(tiny_config(), "transfer", task_index=1, frozen=trained.params)
    assert learner.trainable() == ["manager"]
    learner.run()
    assert (learner.params.options.digest(), learner.params.terminations.digest()) == before
    assert learner.params.rewards is None


@pytest.mark.parametrize("agent", ["mlsh", "option_critic"])
def test_baseline_learners_run(agent):
    result = make_learner(tiny_config(**{"experiment.agent": agent})).run()
    assert result.kind == agent
    assert result.frames >= 200
    assert result.meta_updates == 0
