# -*- coding: utf-8 -*-
"""
Comparison agents: flat actor-critic, MLSH with a fixed option duration, and
multi-task Option-Critic with a deliberation cost.

All three reuse the manager update of the hierarchical agent.  MLSH and
Option-Critic train their option-policies on the task reward collected while
each option was active.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from modac import autodiff as ad
from modac.autodiff import Tensor
from modac.envs import option_view
from modac.metalearn import (SegmentBatch, UpdateResult, UpdateSettings, check_option_heads, policy_entropy,
                             inner_update_manager, option_windows)
from modac.nets import (ParamSet, RmsPropState, manager_forward, option_forward, option_termination_forward,
                        rmsprop_step)
from modac.utils import get_logger

logger = get_logger("modac.baselines")

BASELINE_KINDS = ("flat", "mlsh", "option_critic")


@dataclass(frozen=True)
class BaselineKind:
    kind: str
    duration: int = 5
    deliberation_cost: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"baseline kind must be one of {BASELINE_KINDS}, got '{self.kind}'")
        if self.kind == "mlsh" and self.duration < 1:
            raise ValueError("MLSH option duration must be >= 1")
        if self.kind == "option_critic" and self.deliberation_cost < 0:
            raise ValueError("deliberation cost must be >= 0")


def flat_step(params: ParamSet, batch: SegmentBatch, settings: UpdateSettings, state: RmsPropState) -> UpdateResult:
    """n-step advantage actor-critic on primitive actions."""
    return inner_update_manager(params, batch, settings, state, cost=0.0)


def task_option_returns(params: ParamSet, batch: SegmentBatch, steps: np.ndarray, gamma: float,
                        n_step: int) -> np.ndarray:
    """Discounted task reward inside each invocation, bootstrapped from the option value when cut short."""
    windows = option_windows(batch, steps, n_step)
    ch = batch.choices[steps]
    with ad.no_grad():
        _, next_values = option_forward(params, option_view(batch.next_obs[steps]))
    rewards = batch.rewards[steps]
    out = np.zeros(steps.shape[0])
    for start, n, live, closes in zip(windows.starts, windows.lengths, windows.live, windows.closes):
        g = sum(gamma ** j * rewards[start + j - 1] for j in range(1, n + 1))
        if live and not closes:
            last = start + n - 1
            g += gamma ** (n + 1) * next_values.data[last, ch[last]]
        out[start] = g
    return out


def task_reward_option_update(params: ParamSet, batch: SegmentBatch, settings: UpdateSettings,
                              state: RmsPropState) -> UpdateResult:
    """Actor-critic step of the option-policies on the task reward."""
    check_option_heads(params, batch)
    steps = batch.option_steps
    if steps.size == 0:
        return UpdateResult(params, state, skipped=True)
    rows = np.arange(steps.shape[0])
    ch = batch.choices[steps]
    targets = task_option_returns(params, batch, steps, settings.gamma, settings.n_step)
    logits, values = option_forward(params, option_view(batch.obs[steps]))
    log_probs = ad.getitem(ad.log_softmax(logits), (rows, ch))
    log_pi = ad.gather_last(log_probs, batch.actions[steps])
    v = ad.getitem(values, (rows, ch))
    g = Tensor(targets)
    loss_policy = -ad.mean(Tensor(targets - v.data) * log_pi)
    loss_value = settings.value_coef * ad.mean(0.5 * (g - v) * (g - v))
    entropy = ad.mean(policy_entropy(log_probs))
    loss = loss_policy + loss_value - settings.entropy_coef * entropy
    grads = ad.grad(loss, params.tensors())
    new_params, new_state, info = rmsprop_step(params, grads, state, settings.lr, settings.clip_norm)
    return UpdateResult(new_params, new_state, False, loss_policy.item(), loss_value.item(), entropy.item(), info)


def mlsh_step(manager: ParamSet, options: ParamSet, batch: SegmentBatch, manager_settings: UpdateSettings,
              option_settings: UpdateSettings, states: Dict[str, RmsPropState]) -> Tuple[UpdateResult, UpdateResult]:
    """Joint manager and option update, both on the task reward."""
    manager_result = inner_update_manager(manager, batch, manager_settings, states["manager"], cost=0.0)
    option_result = task_reward_option_update(options, batch, option_settings, states["options"])
    return manager_result, option_result


def termination_advantages(options: ParamSet, manager: ParamSet, batch: SegmentBatch, steps: np.ndarray,
                           deliberation_cost: float) -> np.ndarray:
    """Q_o(s') - V_M(s') + cost on the states reached by ``steps``."""
    ch = batch.choices[steps]
    with ad.no_grad():
        _, q = option_forward(options, option_view(batch.next_obs[steps]))
        _, v = manager_forward(manager, batch.next_obs[steps], batch.task_ids[steps])
    return q.data[np.arange(steps.shape[0]), ch] - v.data + deliberation_cost


def termination_loss(terminations: ParamSet, batch: SegmentBatch, steps: np.ndarray,
                     advantages: np.ndarray) -> Tensor:
    """Mean of beta_o(s') * advantage; descending it raises beta where the option underperforms."""
    rows = np.arange(steps.shape[0])
    betas = option_termination_forward(terminations, option_view(batch.next_obs[steps]))
    beta = ad.getitem(betas, (rows, batch.choices[steps]))
    return ad.mean(beta * Tensor(advantages))


def option_critic_step(manager: ParamSet, options: ParamSet, terminations: ParamSet, batch: SegmentBatch,
                       manager_settings: UpdateSettings, option_settings: UpdateSettings,
                       states: Dict[str, RmsPropState],
                       deliberation_cost: float) -> Tuple[UpdateResult, UpdateResult, Optional[UpdateResult]]:
    """Manager and option-policies on task reward, terminations on the deliberation-cost advantage."""
    manager_result = inner_update_manager(manager, batch, manager_settings, states["manager"], cost=0.0)
    option_result = task_reward_option_update(options, batch, option_settings, states["options"])
    steps = batch.option_steps
    steps = steps[~batch.dones[steps]]
    if steps.size == 0:
        return manager_result, option_result, None
    advantages = termination_advantages(options, manager, batch, steps, deliberation_cost)
    loss = termination_loss(terminations, batch, steps, advantages)
    grads = ad.grad(loss, terminations.tensors())
    new_terms, new_state, info = rmsprop_step(terminations, grads, states["terminations"], option_settings.lr,
                                              option_settings.clip_norm)
    return manager_result, option_result, UpdateResult(new_terms, new_state, False, loss.item(), 0.0, 0.0, info)
