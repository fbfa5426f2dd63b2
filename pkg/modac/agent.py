# -*- coding: utf-8 -*-
"""
Hierarchical controller with call-and-return option execution.

A choice index ``c`` in ``[0, K)`` calls option ``c``; ``c`` in
``[K, K + |A|)`` executes primitive action ``c - K`` for one step.  Once
called, an option acts until its termination fires on the state it just
reached, or the episode ends.  Actors keep their active choice across
segment boundaries, so a segment may open in the middle of an option.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from modac import autodiff as ad
from modac.envs import NUM_ACTIONS, GridLayout, GridWorld, option_view
from modac.nets import (ParamSet, manager_forward, option_forward, option_reward_forward,
                        option_termination_forward)
from modac.utils import get_logger

logger = get_logger("modac.agent")

TERMINATION_MODES = ("learned", "fixed")


def is_option(choice: int, num_options: int) -> bool:
    return 0 <= choice < num_options


def decode_choice(choice: int, num_options: int, num_actions: int = NUM_ACTIONS) -> Tuple[str, int]:
    """Returns ("option", i) or ("primitive", a)."""
    if not 0 <= choice < num_options + num_actions:
        raise ValueError(f"choice {choice} outside [0, {num_options + num_actions})")
    if choice < num_options:
        return "option", choice
    return "primitive", choice - num_options


@dataclass
class AgentParams:
    manager: ParamSet
    options: Optional[ParamSet] = None
    rewards: Optional[ParamSet] = None
    terminations: Optional[ParamSet] = None

    def snapshot(self) -> "AgentParams":
        """Immutable, graph-free copies suitable for acting on other threads."""
        def cut(p: Optional[ParamSet]) -> Optional[ParamSet]:
            return None if p is None else p.detached(requires_grad=False)
        return AgentParams(cut(self.manager), cut(self.options), cut(self.rewards), cut(self.terminations))


@dataclass
class Invocation:
    start: int
    end: int
    choice: int
    ended_by: str  # switch | episode_end | truncated
    decided_here: bool

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class TrajectorySegment:
    """Columnar record of one actor's unroll."""

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    option_rewards: np.ndarray
    betas: np.ndarray
    terminations: np.ndarray
    choices: np.ndarray
    task_ids: np.ndarray
    switches: np.ndarray
    dones: np.ndarray
    cells: np.ndarray
    num_options: int
    completed_returns: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def option_mask(self) -> np.ndarray:
        return self.choices < self.num_options

    @property
    def decision_indices(self) -> np.ndarray:
        return np.nonzero(self.switches)[0]

    def invocations(self) -> List[Invocation]:
        out: List[Invocation] = []
        start = 0
        for t in range(len(self)):
            if t > start and self.switches[t]:
                out.append(Invocation(start, t, int(self.choices[start]), "truncated", bool(self.switches[start])))
                start = t
            if self.terminations[t]:
                ended = "episode_end" if self.dones[t] else "switch"
                out.append(Invocation(start, t + 1, int(self.choices[start]), ended, bool(self.switches[start])))
                start = t + 1
        if start < len(self):
            out.append(Invocation(start, len(self), int(self.choices[start]), "truncated", bool(self.switches[start])))
        return out


class Actor:
    """One environment, its random stream and its in-flight episode."""

    def __init__(self, env: GridWorld, rng: np.random.Generator, task_index: Optional[int] = None):
        self.env = env
        self.rng = rng
        self.fixed_task = task_index
        self.obs: Optional[np.ndarray] = None
        self.task_index = 0
        self.choice: Optional[int] = None
        self.option_steps = 0
        self.episode_return = 0.0
        self.begin_episode()

    def begin_episode(self) -> None:
        if self.fixed_task is None:
            self.task_index = int(self.rng.integers(self.env.num_tasks))
        else:
            self.task_index = self.fixed_task
        self.obs = self.env.reset(self.task_index, self.rng)
        self.choice = None
        self.option_steps = 0
        self.episode_return = 0.0

    @property
    def task_id(self) -> int:
        return self.env.tasks[self.task_index].task_id


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, probs.shape[0] - 1)


class HierarchicalAgent:
    def __init__(self, num_options: int, num_actions: int = NUM_ACTIONS, termination: str = "learned",
                 duration: int = 5):
        if termination not in TERMINATION_MODES:
            raise ValueError(f"termination mode must be one of {TERMINATION_MODES}")
        if termination == "fixed" and duration < 1:
            raise ValueError("fixed option duration must be >= 1")
        self.num_options = num_options
        self.num_actions = num_actions
        self.termination = termination
        self.duration = duration
        self.manager_queries = 0

    @property
    def num_choices(self) -> int:
        return self.num_options + self.num_actions

    def act(self, params: AgentParams, actors: Sequence[Actor], num_steps: int) -> List[TrajectorySegment]:
        """Unrolls every actor for ``num_steps`` environment steps."""
        segments, queries = self.unroll(params, actors, num_steps)
        self.manager_queries += queries
        return segments

    def unroll(self, params: AgentParams, actors: Sequence[Actor],
               num_steps: int) -> Tuple[List[TrajectorySegment], int]:
        """Like :meth:`act` but returns the manager query count instead of adding it to the agent."""
        if self.num_options and (params.options is None or
                                 (self.termination == "learned" and params.terminations is None)):
            raise ValueError("option parameters are required when K > 0")
        b = len(actors)
        shape = actors[0].obs.shape
        buf: Dict[str, np.ndarray] = {
            "obs": np.zeros((b, num_steps) + shape), "next_obs": np.zeros((b, num_steps) + shape),
            "actions": np.zeros((b, num_steps), dtype=np.int64), "rewards": np.zeros((b, num_steps)),
            "option_rewards": np.zeros((b, num_steps)), "betas": np.ones((b, num_steps)),
            "terminations": np.zeros((b, num_steps), dtype=bool), "choices": np.zeros((b, num_steps), dtype=np.int64),
            "task_ids": np.zeros((b, num_steps), dtype=np.int64), "switches": np.zeros((b, num_steps), dtype=bool),
            "dones": np.zeros((b, num_steps), dtype=bool), "cells": np.zeros((b, num_steps, 2), dtype=np.int64),
        }
        completed: List[List[float]] = [[] for _ in actors]
        k = self.num_options
        queries = 0

        with ad.no_grad():
            for t in range(num_steps):
                deciding = [i for i, a in enumerate(actors) if a.choice is None]
                if deciding:
                    obs = np.stack([actors[i].obs for i in deciding])
                    ids = [actors[i].task_id for i in deciding]
                    logits, _ = manager_forward(params.manager, obs, ids)
                    probs = ad.softmax(logits).data
                    queries += len(deciding)
                    for row, i in enumerate(deciding):
                        actors[i].choice = _sample(probs[row], actors[i].rng)
                        actors[i].option_steps = 0
                        buf["switches"][i, t] = True

                in_option = [i for i, a in enumerate(actors) if a.choice < k]
                actions = np.array([a.choice - k for a in actors], dtype=np.int64)
                if in_option:
                    views = option_view(np.stack([actors[i].obs for i in in_option]))
                    logits, _ = option_forward(params.options, views)
                    probs = ad.softmax(logits).data
                    rewards = option_reward_forward(params.rewards, views).data if params.rewards is not None else None
                    for row, i in enumerate(in_option):
                        o = actors[i].choice
                        actions[i] = _sample(probs[row, o], actors[i].rng)
                        if rewards is not None:
                            buf["option_rewards"][i, t] = rewards[row, o, actions[i]]

                for i, actor in enumerate(actors):
                    buf["obs"][i, t] = actor.obs
                    buf["actions"][i, t] = actions[i]
                    buf["choices"][i, t] = actor.choice
                    buf["task_ids"][i, t] = actor.task_id
                    buf["cells"][i, t] = actor.env.state.agent_cell
                    next_obs, reward, done = actor.env.step(int(actions[i]))
                    buf["next_obs"][i, t] = next_obs
                    buf["rewards"][i, t] = reward
                    buf["dones"][i, t] = done
                    actor.obs = next_obs
                    actor.episode_return += reward
                    actor.option_steps += 1

                if in_option:
                    if self.termination == "learned":
                        views = option_view(np.stack([actors[i].obs for i in in_option]))
                        betas = option_termination_forward(params.terminations, views).data
                    for row, i in enumerate(in_option):
                        actor = actors[i]
                        if self.termination == "learned":
                            beta = float(betas[row, actor.choice])
                        else:
                            beta = 1.0 if actor.option_steps >= self.duration else 0.0
                        buf["betas"][i, t] = beta
                        if not buf["dones"][i, t]:
                            fired = actor.rng.random() < beta if self.termination == "learned" else beta >= 1.0
                            buf["terminations"][i, t] = fired

                for i, actor in enumerate(actors):
                    if actor.choice >= k:
                        buf["terminations"][i, t] = True
                    if buf["dones"][i, t]:
                        buf["terminations"][i, t] = True
                        completed[i].append(actor.episode_return)
                        actor.begin_episode()
                    elif buf["terminations"][i, t]:
                        actor.choice = None

        segments = [TrajectorySegment(**{key: value[i] for key, value in buf.items()}, num_options=k,
                                      completed_returns=completed[i]) for i in range(b)]
        return segments, queries


class ActorPool:
    """Groups of actors that roll out independently, optionally on threads.

    Each actor owns its random stream, so results do not depend on whether
    groups run concurrently; ``deterministic`` only fixes execution order.
    """

    def __init__(self, actors: Sequence[Actor], groups: int = 1, deterministic: bool = True):
        if not actors:
            raise ValueError("ActorPool needs at least one actor")
        groups = max(1, min(groups, len(actors)))
        self.actors = list(actors)
        self.groups = [self.actors[g::groups] for g in range(groups)]
        self.deterministic = deterministic

    def __len__(self) -> int:
        return len(self.actors)

    def restart(self) -> None:
        for actor in self.actors:
            actor.begin_episode()

    def rollout(self, agent: HierarchicalAgent, params: AgentParams, num_steps: int) -> List[TrajectorySegment]:
        snapshot = params.snapshot()
        if self.deterministic or len(self.groups) == 1:
            unrolled = [agent.unroll(snapshot, group, num_steps) for group in self.groups]
        else:
            with ThreadPoolExecutor(max_workers=len(self.groups)) as pool:
                unrolled = list(pool.map(lambda g: agent.unroll(snapshot, g, num_steps), self.groups))
        agent.manager_queries += sum(queries for _, queries in unrolled)
        results = [segments for segments, _ in unrolled]
        by_actor = {}
        for group, segments in zip(self.groups, results):
            for actor, segment in zip(group, segments):
                by_actor[id(actor)] = segment
        return [by_actor[id(a)] for a in self.actors]


@dataclass
class OptionUsage:
    histogram: np.ndarray
    mean_option_length: float
    option_fraction: float
    selection_fraction: float
    length_defined: bool
    decisions: int
    steps: int


class UsageCounter:
    """Running counts behind :class:`OptionUsage`."""

    def __init__(self, num_options: int, num_choices: int):
        self.num_options = num_options
        self.counts = np.zeros(num_choices)
        self.steps = 0
        self.option_steps = 0
        self.option_decisions = 0

    def add(self, segments: Sequence[TrajectorySegment]) -> None:
        k, size = self.num_options, self.counts.shape[0]
        for seg in segments:
            decided = seg.choices[seg.switches]
            self.counts += np.bincount(decided, minlength=size)[:size]
            self.option_decisions += int(np.sum(decided < k))
            self.option_steps += int(np.sum(seg.option_mask))
            self.steps += len(seg)

    def stats(self) -> OptionUsage:
        decisions = int(self.counts.sum())
        defined = self.option_decisions > 0
        return OptionUsage(
            histogram=self.counts / decisions if decisions else self.counts.copy(),
            mean_option_length=self.option_steps / self.option_decisions if defined else 0.0,
            option_fraction=self.option_steps / self.steps if self.steps else 0.0,
            selection_fraction=self.option_decisions / decisions if decisions else 0.0,
            length_defined=defined,
            decisions=decisions,
            steps=self.steps,
        )


def option_usage_stats(segments: Sequence[TrajectorySegment], num_choices: int | None = None) -> OptionUsage:
    """Choice histogram over manager decisions, mean option length and time under options.

    Mean option length is steps taken under options divided by option
    selections; it is reported as 0 with ``length_defined`` False when no
    option was selected.
    """
    if not segments:
        raise ValueError("option_usage_stats needs at least one segment")
    k = segments[0].num_options
    counter = UsageCounter(k, num_choices if num_choices is not None else k + NUM_ACTIONS)
    counter.add(segments)
    return counter.stats()


TRAJECTORY_COLUMNS = ("step", "x", "y", "action", "reward", "active_option")


def export_trajectory_csv(segment: TrajectorySegment, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_COLUMNS)
        for t in range(len(segment)):
            choice = int(segment.choices[t])
            active = choice if choice < segment.num_options else -1
            x, y = segment.cells[t]
            writer.writerow([t, int(x), int(y), int(segment.actions[t]), float(segment.rewards[t]), active])
    return path


def cell_observations(layout: GridLayout, cells: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Option-view observations with the agent placed on each cell."""
    obs = np.zeros((len(cells), 2, layout.height, layout.width))
    obs[:, 1] = layout.layout_channel()
    for n, (x, y) in enumerate(cells):
        obs[n, 0, y, x] = 1.0
    return obs


def option_arrow_map(options: ParamSet, terminations: Optional[ParamSet], layout: GridLayout,
                     obs_grid: Tuple[int, int] | None = None) -> Dict[int, List[Tuple[int, int, int, float]]]:
    """For every option: (x, y, argmax action, beta) over all open cells."""
    cells = layout.open_cells
    obs = cell_observations(layout, cells)
    if obs_grid is not None and tuple(obs_grid) != obs.shape[2:]:
        padded = np.zeros((obs.shape[0], 2) + tuple(obs_grid))
        padded[:, 1] = 1.0
        padded[:, :, :layout.height, :layout.width] = obs
        obs = padded
    with ad.no_grad():
        logits, _ = option_forward(options, obs)
        betas = option_termination_forward(terminations, obs).data if terminations is not None else None
    best = np.argmax(logits.data, axis=-1)
    out: Dict[int, List[Tuple[int, int, int, float]]] = {}
    for o in range(logits.shape[1]):
        rows = []
        for n, (x, y) in enumerate(cells):
            beta = float(betas[n, o]) if betas is not None else float("nan")
            rows.append((x, y, int(best[n, o]), beta))
        out[o] = rows
    return out
