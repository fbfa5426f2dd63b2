import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac.bootstrap import ConfigError, ExperimentConfig, load_config, load_experiment, parse_override
from modac.utils import config_hash, derive_rng, standard_error


def test_load_config_default():
    data = load_config("default")
    assert data["agent"]["num_options"] == 4
    assert data["optim"]["meta_lr"] == 0.0001


def test_load_config_missing_returns_empty():
    assert load_config("no_such_config") == {}


def test_default_experiment_values():
    cfg = load_experiment()
    assert cfg.agent.switching_cost == 0.05
    assert cfg.agent.n_step == 20 and cfg.agent.inner_steps == 5
    assert cfg.optim.rms_decay == 0.99 and cfg.optim.rms_epsilon == 0.01
    assert cfg.optim.clip_norm == 40.0 and cfg.optim.meta_clip == 1.0
    assert cfg.frames_per_rollout == cfg.agent.num_actors * 20


def test_named_configs_validate():
    assert load_experiment("full_scale").budget.train_frames == 10_000_000
    assert load_experiment("procedural").env.task_encoding == "task_id"


def test_overrides_are_parsed_as_yaml():
    assert parse_override("agent.num_options=8") == ("agent.num_options", 8)
    assert parse_override("experiment.agent=flat") == ("experiment.agent", "flat")
    with pytest.raises(ConfigError):
        parse_override("agent.num_options")
    cfg = load_experiment(None, {"agent.num_options": 8})
    assert cfg.agent.num_options == 8


@pytest.mark.parametrize("dotted, value", [
    ("experiment.agent", "hiro"),
    ("agent.num_options", -1),
    ("agent.gamma", 1.5),
    ("agent.truncation", "sometimes"),
    ("optim.lr", 0.0),
    ("budget.train_frames", 0),
    ("agent.num_options", "four"),
    ("experiment.deterministic", "yes"),
])
def test_invalid_values_rejected(dotted, value):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_override(dotted, value)


def test_unknown_key_rejected_on_override():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_override("agent.colour", 1)


def test_unknown_yaml_keys_warned(mocker):
    warn = mocker.patch("modac.bootstrap.logger.warning")
    ExperimentConfig.from_dict({"agent": {"colour": "red"}, "extras": {}})
    assert warn.call_count == 2


def test_procedural_requires_task_ids():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"env": {"kind": "procedural", "task_encoding": "goal"}})


def test_config_file_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("agent:\n  num_options: 2\n")
    assert load_experiment(str(path)).agent.num_options == 2
    with pytest.raises(ConfigError):
        load_experiment("definitely_missing")


def test_hash_is_stable_and_sensitive():
    a = ExperimentConfig()
    assert a.hash == ExperimentConfig().hash
    assert a.hash != a.with_override("agent.switching_cost", 0.1).hash
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})


def test_derived_streams_are_independent():
    a = derive_rng(0, "train", "actor", 0).random(4)
    b = derive_rng(0, "train", "actor", 0).random(4)
    c = derive_rng(0, "train", "actor", 1).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_standard_error():
    assert np.isnan(standard_error([1.0]))
    assert standard_error([1.0, 3.0, float("nan")]) == pytest.approx(1.0)
