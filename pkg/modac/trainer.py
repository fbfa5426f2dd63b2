# -*- coding: utf-8 -*-
"""
Learners: the hierarchical meta-gradient learner, the baselines and the
shared frame accounting and metrics stream.

A learner owns its actors, parameters and optimizer states.  ``run`` keeps
calling ``step`` until the frame budget of its phase is used up, emitting a
metrics row every ``budget.log_every_frames`` frames and a usage snapshot
every ``budget.usage_every_frames`` frames.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from modac import autodiff as ad
from modac.agent import (Actor, ActorPool, AgentParams, HierarchicalAgent, TrajectorySegment, UsageCounter)
from modac.baselines import flat_step, mlsh_step, option_critic_step
from modac.bootstrap import ExperimentConfig
from modac.envs import NUM_ACTIONS, OPTION_CHANNELS, GridWorld, build_env
from modac.metalearn import (SegmentBatch, UpdateResult, UpdateSettings, inner_update_manager,
                             inner_update_option, meta_update)
from modac.nets import (ParamSet, RmsPropState, init_params, manager_spec, option_policy_spec, option_reward_spec,
                        option_termination_spec)
from modac.utils import derive_rng, get_logger, standard_error

logger = get_logger("modac.trainer")

CheckpointHook = Callable[[int, AgentParams], None]


def metric_columns(num_choices: int) -> List[str]:
    return (["frames", "episode_return_mean", "episode_return_sem", "option_frac", "mean_option_len"]
            + [f"choice_hist_{i}" for i in range(num_choices)]
            + ["meta_grad_norm", "loss_policy", "loss_value"])


def usage_columns(num_choices: int) -> List[str]:
    return ["frames", "decisions", "mean_option_len", "option_frac"] + [f"choice_hist_{i}" for i in range(num_choices)]


class MetricsWindow:
    """Accumulates everything reported in one metrics row."""

    def __init__(self, num_options: int, num_choices: int):
        self.num_options = num_options
        self.num_choices = num_choices
        self.reset()

    def reset(self) -> None:
        self.returns: List[float] = []
        self.usage = UsageCounter(self.num_options, self.num_choices)
        self.meta_norms: List[float] = []
        self.policy_losses: List[float] = []
        self.value_losses: List[float] = []

    def add_segments(self, segments: Sequence[TrajectorySegment]) -> None:
        self.usage.add(segments)
        for seg in segments:
            self.returns.extend(seg.completed_returns)

    def add_losses(self, result: UpdateResult) -> None:
        if not result.skipped:
            self.policy_losses.append(result.loss_policy)
            self.value_losses.append(result.loss_value)

    def row(self, frames: int) -> Dict[str, float]:
        usage = self.usage.stats()
        row: Dict[str, float] = {
            "frames": frames,
            "episode_return_mean": float(np.mean(self.returns)) if self.returns else float("nan"),
            "episode_return_sem": standard_error(self.returns),
            "option_frac": usage.option_fraction,
            "mean_option_len": usage.mean_option_length,
        }
        for i, value in enumerate(usage.histogram):
            row[f"choice_hist_{i}"] = float(value)
        row["meta_grad_norm"] = float(np.mean(self.meta_norms)) if self.meta_norms else float("nan")
        row["loss_policy"] = float(np.mean(self.policy_losses)) if self.policy_losses else float("nan")
        row["loss_value"] = float(np.mean(self.value_losses)) if self.value_losses else float("nan")
        return row


@dataclass
class LearnerResult:
    rows: List[Dict[str, float]]
    usage: List[Dict[str, float]]
    params: AgentParams
    frames: int
    outer_steps: int
    columns: List[str]
    meta_updates: int = 0
    meta_skips: int = 0
    wall_clock: float = 0.0
    kind: str = "modac"


class Learner:
    """Shared acting, accounting and reporting."""

    kind = "modac"
    termination_mode = "learned"

    def __init__(self, config: ExperimentConfig, phase: str = "train", seed: Optional[int] = None,
                 task_index: Optional[int] = None, frozen: Optional[AgentParams] = None,
                 checkpoint_hook: Optional[CheckpointHook] = None):
        if phase not in ("train", "transfer"):
            raise ValueError(f"phase must be 'train' or 'transfer', got '{phase}'")
        self.config = config
        self.phase = phase
        self.seed = config.experiment.seed if seed is None else int(seed)
        self.task_index = task_index
        self.checkpoint_hook = checkpoint_hook
        env_phase = "train" if phase == "train" else "test"
        self.task_tag = "all" if task_index is None else f"task{task_index}"

        a = config.agent
        self.actors = [Actor(self._env(env_phase), derive_rng(self.seed, phase, self.task_tag, "actor", i), task_index)
                       for i in range(a.num_actors)]
        self.pool = ActorPool(self.actors, a.actor_groups, config.experiment.deterministic)
        self.env: GridWorld = self.actors[0].env
        self.num_options = self.resolve_num_options()
        self.agent = HierarchicalAgent(self.num_options, NUM_ACTIONS, self.termination_mode, a.mlsh_duration)
        self.frozen = frozen is not None
        self.params = self.init_params(frozen)
        self.states: Dict[str, RmsPropState] = {}
        for name in self.trainable():
            o = config.optim
            self.states[name] = RmsPropState.zeros(getattr(self.params, name), o.rms_decay, o.rms_epsilon, o.momentum)

        self.frames = 0
        self.outer_steps = 0
        self.meta_updates = 0
        self.meta_skips = 0
        self.window = MetricsWindow(self.num_options, self.num_choices)
        self.usage_window = UsageCounter(self.num_options, self.num_choices)
        self.rows: List[Dict[str, float]] = []
        self.usage_rows: List[Dict[str, float]] = []

    # --- construction --------------------------------------------------
    def _env(self, env_phase: str) -> GridWorld:
        return build_env(asdict(self.config.env), env_phase)

    def resolve_num_options(self) -> int:
        return self.config.agent.num_options

    @property
    def num_choices(self) -> int:
        return self.num_options + NUM_ACTIONS

    @property
    def budget(self) -> int:
        b = self.config.budget
        return b.train_frames if self.phase == "train" else b.transfer_frames

    @property
    def frames_per_rollout(self) -> int:
        return len(self.actors) * self.config.agent.n_step

    def _rng(self, role: str) -> np.random.Generator:
        if self.phase == "train":
            return derive_rng(self.seed, "init", role)
        return derive_rng(self.seed, "init", role, "transfer", self.task_tag)

    def manager_params(self) -> ParamSet:
        env = self.env
        embedding = self.config.network.task_embedding if env.encoding == "task_id" else 0
        spec = manager_spec(self.num_options, NUM_ACTIONS, env.obs_grid, env.obs_channels,
                            num_tasks=env.num_tasks if embedding else 0, task_embedding=embedding,
                            **self.config.torso_kwargs())
        return init_params(spec, self._rng("manager"))

    def option_params(self, role: str) -> ParamSet:
        k, grid, torso = self.num_options, self.env.obs_grid, self.config.torso_kwargs()
        if role == "option_policy":
            spec = option_policy_spec(k, NUM_ACTIONS, grid, OPTION_CHANNELS, **torso)
        elif role == "option_reward":
            spec = option_reward_spec(k, NUM_ACTIONS, grid, OPTION_CHANNELS, **torso)
        else:
            spec = option_termination_spec(k, grid, OPTION_CHANNELS, **torso)
        return init_params(spec, self._rng(role))

    def init_params(self, frozen: Optional[AgentParams]) -> AgentParams:
        manager = self.manager_params()
        if frozen is not None:
            return AgentParams(manager, frozen.options, None, frozen.terminations)
        if self.num_options == 0:
            return AgentParams(manager)
        return AgentParams(manager, self.option_params("option_policy"), self.option_params("option_reward"),
                           self.option_params("option_termination"))

    def trainable(self) -> List[str]:
        if self.phase == "transfer" or self.num_options == 0:
            return ["manager"]
        return ["manager", "options", "rewards", "terminations"]

    def settings(self, role: str) -> UpdateSettings:
        o, a = self.config.optim, self.config.agent
        if role == "manager":
            return UpdateSettings(o.lr, o.value_coef, o.entropy_coef, o.clip_norm, a.n_step, a.gamma)
        return UpdateSettings(o.lr, o.option_value_coef, o.option_entropy_coef, o.clip_norm, a.n_step, a.gamma)

    # --- acting ----------------------------------------------------------
    def rollout(self, pool: Optional[ActorPool] = None, params: Optional[AgentParams] = None,
                record: bool = True) -> SegmentBatch:
        segments = (pool or self.pool).rollout(self.agent, params or self.params, self.config.agent.n_step)
        self.frames += len(segments) * self.config.agent.n_step
        if record:
            self.window.add_segments(segments)
            self.usage_window.add(segments)
        return SegmentBatch.from_segments(segments)

    def update_manager(self, batch: SegmentBatch) -> UpdateResult:
        result = inner_update_manager(self.params.manager, batch, self.settings("manager"), self.states["manager"],
                                      cost=self.config.agent.switching_cost, phase=self.phase)
        self.params.manager, self.states["manager"] = result.params, result.state
        self.window.add_losses(result)
        return result

    def manager_only_step(self) -> None:
        self.update_manager(self.rollout())

    def train_step(self) -> None:
        raise NotImplementedError

    def step(self) -> None:
        if self.phase == "transfer" or self.num_options == 0:
            self.manager_only_step()
        else:
            self.train_step()
        self.outer_steps += 1

    # --- reporting -------------------------------------------------------
    def _emit_row(self) -> None:
        row = self.window.row(self.frames)
        self.rows.append(row)
        self.window.reset()
        logger.info("[%s/%s] frames=%d return=%.3f option_frac=%.3f option_len=%.2f", self.kind, self.phase,
                    self.frames, row["episode_return_mean"], row["option_frac"], row["mean_option_len"])

    def _emit_usage(self) -> None:
        usage = self.usage_window.stats()
        row = {"frames": self.frames, "decisions": usage.decisions, "mean_option_len": usage.mean_option_length,
               "option_frac": usage.option_fraction}
        for i, value in enumerate(usage.histogram):
            row[f"choice_hist_{i}"] = float(value)
        self.usage_rows.append(row)
        self.usage_window = UsageCounter(self.num_options, self.num_choices)

    def run(self) -> LearnerResult:
        b = self.config.budget
        started = time.perf_counter()
        next_row, next_usage = b.log_every_frames, b.usage_every_frames
        next_ckpt = b.checkpoint_every_frames or None
        while self.frames < self.budget:
            self.step()
            if self.frames >= next_row:
                self._emit_row()
                next_row = (self.frames // b.log_every_frames + 1) * b.log_every_frames
            if self.frames >= next_usage:
                self._emit_usage()
                next_usage = (self.frames // b.usage_every_frames + 1) * b.usage_every_frames
            if next_ckpt is not None and self.frames >= next_ckpt and self.checkpoint_hook is not None:
                self.checkpoint_hook(self.frames, self.params)
                next_ckpt = (self.frames // b.checkpoint_every_frames + 1) * b.checkpoint_every_frames
        if not self.rows or self.rows[-1]["frames"] != self.frames:
            self._emit_row()
        if self.usage_window.steps:
            self._emit_usage()
        return LearnerResult(self.rows, self.usage_rows, self.params, self.frames, self.outer_steps,
                             metric_columns(self.num_choices), self.meta_updates, self.meta_skips,
                             time.perf_counter() - started, self.kind)


class ModacLearner(Learner):
    """L recorded option-policy updates followed by one meta-update of the option-rewards and terminations."""

    kind = "modac"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        a = self.config.agent
        self.validation_pool: Optional[ActorPool] = None
        if self.phase == "train" and self.num_options > 0:
            actors = [Actor(self._env("train"), derive_rng(self.seed, "validation", "actor", i))
                      for i in range(a.num_actors)]
            self.validation_pool = ActorPool(actors, a.actor_groups, self.config.experiment.deterministic)

    def train_step(self) -> None:
        a, o = self.config.agent, self.config.optim
        running = a.option_return == "running_product"
        theta = self.params.options.detached()
        eta_r = self.params.rewards.detached()
        eta_beta = self.params.terminations.detached()
        recorded = False
        with ad.Tape():
            for step in range(a.inner_steps):
                if self.frames >= self.budget:
                    break
                differentiable = a.truncation == "full" or step == a.inner_steps - 1
                if not differentiable:
                    theta = theta.detached()
                acting = AgentParams(self.params.manager, theta, eta_r, eta_beta)
                batch = self.rollout(params=acting)
                result = inner_update_option(theta, batch, eta_r, eta_beta, self.settings("options"),
                                             self.states["options"], differentiable=differentiable,
                                             running_product=running)
                theta, self.states["options"] = result.params, result.state
                recorded = recorded or (differentiable and not result.skipped)
                self.update_manager(batch)

            if recorded and theta.is_differentiable and self.frames < self.budget:
                self.validation_pool.restart()
                validation = self.rollout(self.validation_pool,
                                          AgentParams(self.params.manager, theta, eta_r, eta_beta), record=False)
                meta = meta_update(eta_r, eta_beta, theta, self.params.manager, validation, self.states["rewards"],
                                   self.states["terminations"], o.meta_lr, o.meta_clip, a.gamma, a.n_step,
                                   a.switching_cost, self.phase)
                if meta.skipped:
                    self.meta_skips += 1
                else:
                    self.meta_updates += 1
                    self.window.meta_norms.append(meta.grad_norm)
                eta_r, eta_beta = meta.eta_r, meta.eta_beta
                self.states["rewards"], self.states["terminations"] = meta.state_r, meta.state_beta
            elif not recorded:
                self.meta_skips += 1
        self.params.options = theta.detached()
        self.params.rewards = eta_r.detached()
        self.params.terminations = eta_beta.detached()


class FlatLearner(Learner):
    kind = "flat"

    def resolve_num_options(self) -> int:
        return 0

    def manager_only_step(self) -> None:
        batch = self.rollout()
        result = flat_step(self.params.manager, batch, self.settings("manager"), self.states["manager"])
        self.params.manager, self.states["manager"] = result.params, result.state
        self.window.add_losses(result)


class MlshLearner(Learner):
    kind = "mlsh"
    termination_mode = "fixed"

    def init_params(self, frozen: Optional[AgentParams]) -> AgentParams:
        manager = self.manager_params()
        if frozen is not None:
            return AgentParams(manager, frozen.options)
        return AgentParams(manager, self.option_params("option_policy"))

    def trainable(self) -> List[str]:
        return ["manager"] if self.phase == "transfer" else ["manager", "options"]

    def train_step(self) -> None:
        batch = self.rollout()
        manager, options = mlsh_step(self.params.manager, self.params.options, batch, self.settings("manager"),
                                     self.settings("options"), self.states)
        self.params.manager, self.states["manager"] = manager.params, manager.state
        self.params.options, self.states["options"] = options.params, options.state
        self.window.add_losses(manager)


class OptionCriticLearner(Learner):
    kind = "option_critic"

    def init_params(self, frozen: Optional[AgentParams]) -> AgentParams:
        manager = self.manager_params()
        if frozen is not None:
            return AgentParams(manager, frozen.options, None, frozen.terminations)
        return AgentParams(manager, self.option_params("option_policy"), None,
                           self.option_params("option_termination"))

    def trainable(self) -> List[str]:
        return ["manager"] if self.phase == "transfer" else ["manager", "options", "terminations"]

    def train_step(self) -> None:
        batch = self.rollout()
        manager, options, terms = option_critic_step(
            self.params.manager, self.params.options, self.params.terminations, batch, self.settings("manager"),
            self.settings("options"), self.states, self.config.agent.deliberation_cost)
        self.params.manager, self.states["manager"] = manager.params, manager.state
        self.params.options, self.states["options"] = options.params, options.state
        if terms is not None:
            self.params.terminations, self.states["terminations"] = terms.params, terms.state
        self.window.add_losses(manager)


LEARNERS = {"modac": ModacLearner, "flat": FlatLearner, "mlsh": MlshLearner, "option_critic": OptionCriticLearner}


def make_learner(config: ExperimentConfig, phase: str = "train", **kwargs) -> Learner:
    return LEARNERS[config.experiment.agent](config, phase, **kwargs)


def algorithm1_driver(config: ExperimentConfig, rng: Optional[np.random.Generator] = None,
                      checkpoint_hook: Optional[CheckpointHook] = None, seed: Optional[int] = None) -> LearnerResult:
    """Trains the hierarchical agent until the training frame budget is spent.

    The run seed is ``seed``, else drawn from ``rng``, else the configured one.
    """
    if seed is None and rng is not None:
        seed = int(rng.integers(2 ** 31 - 1))
    learner = ModacLearner(config, "train", seed=seed, checkpoint_hook=checkpoint_hook)
    logger.info("training %s: K=%d, c=%.4g, %d frames", config.experiment.name, learner.num_options,
                config.agent.switching_cost, learner.budget)
    return learner.run()
