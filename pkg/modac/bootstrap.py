# -*- coding: utf-8 -*-
"""
Configuration loading and validation.

Run configurations live as YAML files in the top-level ``configs`` directory
and are resolved into an :class:`ExperimentConfig`, a tree of dataclasses
with one section per concern.  Unknown keys are reported and ignored;
invalid values raise :class:`ConfigError`.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from modac.utils import config_hash, get_logger

logger = get_logger("modac.bootstrap")

# Configuration files are stored in a top-level ``configs`` directory so that
# they can be shared across modules and modified without touching the package.
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

_loaded_configs: Dict[str, Any] = {}

AGENT_KINDS = ("modac", "flat", "mlsh", "option_critic")
ENV_KINDS = ("four_rooms", "procedural")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def load_config(name: str) -> Dict[str, Any]:
    """Load a YAML or JSON configuration file from the config directory.

    The function caches loaded configurations to avoid repeated disk access.
    """
    if name in _loaded_configs:
        return copy.deepcopy(_loaded_configs[name])

    path_yaml = CONFIG_DIR / f"{name}.yaml"
    path_json = CONFIG_DIR / f"{name}.json"
    data: Dict[str, Any] | None = None
    if path_yaml.exists():
        with open(path_yaml, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    elif path_json.exists():
        with open(path_json, "r", encoding="utf-8") as f:
            data = json.load(f)
    else:
        data = {}

    _loaded_configs[name] = data
    return copy.deepcopy(data)


@dataclass
class ExperimentSection:
    name: str = "four_rooms_modac"
    agent: str = "modac"
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    deterministic: bool = True
    output_dir: str = "runs"


@dataclass
class EnvSection:
    kind: str = "four_rooms"
    max_steps: int = 100
    task_encoding: str = "goal"
    train_goals: Optional[List[List[int]]] = None
    test_goals: Optional[List[List[int]]] = None
    layout_file: Optional[str] = None
    obs_size: int = 21
    train_difficulty: str = "simple"
    test_difficulty: str = "hard"


@dataclass
class AgentSection:
    num_options: int = 4
    switching_cost: float = 0.05
    gamma: float = 0.99
    n_step: int = 20
    inner_steps: int = 5
    num_actors: int = 8
    actor_groups: int = 1
    truncation: str = "full"
    option_return: str = "literal"
    mlsh_duration: int = 5
    deliberation_cost: float = 0.01


@dataclass
class NetworkSection:
    torso: str = "conv2"
    filters: int = 32
    kernel: int = 2
    padding: str = "valid"
    dense: int = 256
    mlp_hidden: List[int] = field(default_factory=lambda: [64])
    activation: str = "relu"
    task_embedding: int = 16


@dataclass
class OptimSection:
    lr: float = 0.001
    meta_lr: float = 0.0001
    value_coef: float = 0.5
    option_value_coef: float = 0.5
    entropy_coef: float = 0.01
    option_entropy_coef: float = 0.01
    rms_decay: float = 0.99
    rms_epsilon: float = 0.01
    momentum: float = 0.0
    clip_norm: float = 40.0
    meta_clip: float = 1.0


@dataclass
class BudgetSection:
    train_frames: int = 2_000_000
    transfer_frames: int = 200_000
    log_every_frames: int = 10_000
    usage_every_frames: int = 500_000
    checkpoint_every_frames: int = 0


SECTIONS = {
    "experiment": ExperimentSection,
    "env": EnvSection,
    "agent": AgentSection,
    "network": NetworkSection,
    "optim": OptimSection,
    "budget": BudgetSection,
}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return list(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot use {value!r} where a {type(default).__name__} is expected")
    return value


def _build_section(name: str, data: Mapping[str, Any] | None) -> Any:
    cls = SECTIONS[name]
    data = dict(data or {})
    defaults = cls()
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            logger.warning("Unknown key '%s' in config section '%s' (ignored).", key, name)
    values = {k: _coerce(name, k, data[k], getattr(defaults, k)) for k in known if k in data}
    return replace(defaults, **values)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    optim: OptimSection = field(default_factory=OptimSection)
    budget: BudgetSection = field(default_factory=BudgetSection)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "ExperimentConfig":
        data = dict(data or {})
        for key in data:
            if key not in SECTIONS:
                logger.warning("Unknown config section '%s' (ignored).", key)
        cfg = cls(**{name: _build_section(name, data.get(name)) for name in SECTIONS})
        cfg.validate()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_override(self, dotted: str, value: Any) -> "ExperimentConfig":
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key or key not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key '{dotted}'")
        data = self.to_dict()
        data[section][key] = value
        return ExperimentConfig.from_dict(data)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        cfg = self
        for key, value in overrides.items():
            cfg = cfg.with_override(key, value)
        return cfg

    def validate(self) -> None:
        def check(ok: bool, message: str) -> None:
            if not ok:
                raise ConfigError(message)

        e, env, a, n, o, b = self.experiment, self.env, self.agent, self.network, self.optim, self.budget
        check(e.agent in AGENT_KINDS, f"experiment.agent must be one of {AGENT_KINDS}, got '{e.agent}'")
        check(len(e.seeds) > 0 and all(isinstance(s, int) and s >= 0 for s in e.seeds),
              "experiment.seeds must be a non-empty list of non-negative integers")
        check(e.seed >= 0, "experiment.seed must be non-negative")
        check(env.kind in ENV_KINDS, f"env.kind must be one of {ENV_KINDS}")
        check(env.max_steps >= 1, "env.max_steps must be >= 1")
        check(env.task_encoding in ("goal", "task_id"), "env.task_encoding must be 'goal' or 'task_id'")
        check(env.kind != "procedural" or env.task_encoding == "task_id",
              "procedural environments are conditioned on task ids")
        check(a.num_options >= 0, "agent.num_options must be >= 0")
        check(e.agent not in ("mlsh", "option_critic") or a.num_options >= 1, f"{e.agent} needs num_options >= 1")
        check(a.switching_cost >= 0, "agent.switching_cost must be >= 0")
        check(0 < a.gamma <= 1, "agent.gamma must lie in (0, 1]")
        check(a.n_step >= 1, "agent.n_step must be >= 1")
        check(a.inner_steps >= 1, "agent.inner_steps must be >= 1")
        check(a.num_actors >= 1 and a.actor_groups >= 1, "agent.num_actors and agent.actor_groups must be >= 1")
        check(a.truncation in ("full", "last_step"), "agent.truncation must be 'full' or 'last_step'")
        check(a.option_return in ("literal", "running_product"), "agent.option_return must be 'literal' or 'running_product'")
        check(a.mlsh_duration >= 1, "agent.mlsh_duration must be >= 1")
        check(a.deliberation_cost >= 0, "agent.deliberation_cost must be >= 0")
        check(n.torso in ("conv2", "mlp"), "network.torso must be 'conv2' or 'mlp'")
        check(n.activation in ("relu", "tanh"), "network.activation must be 'relu' or 'tanh'")
        check(n.padding in ("valid", "same"), "network.padding must be 'valid' or 'same'")
        check(n.filters >= 1 and n.kernel >= 1 and n.dense >= 1, "network sizes must be positive")
        check(all(int(h) >= 1 for h in n.mlp_hidden), "network.mlp_hidden sizes must be positive")
        check(n.task_embedding >= 1 or env.task_encoding == "goal", "task_id encoding needs network.task_embedding >= 1")
        check(o.lr > 0, "optim.lr must be positive")
        check(o.meta_lr >= 0, "optim.meta_lr must be >= 0")
        check(min(o.value_coef, o.option_value_coef, o.entropy_coef, o.option_entropy_coef) >= 0,
              "loss coefficients must be >= 0")
        check(0 <= o.rms_decay < 1, "optim.rms_decay must lie in [0, 1)")
        check(o.rms_epsilon >= 0 and 0 <= o.momentum < 1, "optim.rms_epsilon >= 0 and momentum in [0, 1) required")
        check(o.clip_norm > 0 and o.meta_clip > 0, "gradient clips must be positive")
        check(b.train_frames > 0, "budget.train_frames must be positive")
        check(b.transfer_frames > 0, "budget.transfer_frames must be positive")
        check(b.log_every_frames > 0, "budget.log_every_frames must be positive")
        check(b.usage_every_frames > 0, "budget.usage_every_frames must be positive")
        check(b.checkpoint_every_frames >= 0, "budget.checkpoint_every_frames must be >= 0")

    @property
    def frames_per_rollout(self) -> int:
        return self.agent.num_actors * self.agent.n_step

    def torso_kwargs(self) -> Dict[str, Any]:
        n = self.network
        return {"torso": n.torso, "filters": n.filters, "kernel": n.kernel, "padding": n.padding,
                "dense": n.dense, "mlp_hidden": tuple(n.mlp_hidden), "activation": n.activation}


def parse_override(text: str) -> Tuple[str, Any]:
    """``section.key=value`` with the value parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    return key.strip(), yaml.safe_load(raw)


def load_experiment(source: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Resolve a config from a file path or a name under ``configs/``."""
    if source is None:
        data = load_config("default")
    else:
        path = Path(source)
        if path.exists():
            with open(path, "r", encoding="utf-8") as f:
                data = (yaml.safe_load(f) if path.suffix in (".yaml", ".yml") else json.load(f)) or {}
        else:
            data = load_config(str(source))
            if not data:
                raise ConfigError(f"no configuration named '{source}'")
    if not isinstance(data, dict):
        raise ConfigError(f"configuration {source} must be a mapping")
    cfg = ExperimentConfig.from_dict(data)
    return cfg.with_overrides(overrides or {})
