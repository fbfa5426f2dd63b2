# -*- coding: utf-8 -*-
"""
Returns, inner actor-critic updates and the meta-gradient update.

Option returns weight each option-reward by ``(1 - beta)`` raised to its
step index and bootstrap from the option's value; manager returns are
discounted task rewards with a switching cost charged at every manager
re-decision.  Option-policy updates can be recorded so that the updated
parameters remain differentiable functions of the option-reward and
option-termination parameters; :func:`meta_update` differentiates the
manager's validation advantage through them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modac import autodiff as ad
from modac.agent import TrajectorySegment
from modac.autodiff import Tensor
from modac.envs import option_view
from modac.nets import (ParamSet, RmsPropState, StepInfo, global_norm, manager_forward, option_forward,
                        option_reward_forward, option_termination_forward, rmsprop_step)
from modac.utils import get_logger

logger = get_logger("modac.metalearn")


class MetaGradientError(RuntimeError):
    """Meta-update requested on parameters without a recorded update."""


class SegmentError(ValueError):
    """Trajectory data inconsistent with the request."""


@dataclass(frozen=True)
class UpdateSettings:
    lr: float
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    clip_norm: float = 40.0
    n_step: int = 20
    gamma: float = 0.99


# --- returns -----------------------------------------------------------------

def option_return(rewards: Any, betas: Any, n: int, bootstrap: Any, running_product: bool = False) -> Any:
    """G^o over ``n`` steps.

    ``rewards[j-1]`` and ``betas[j-1]`` are the option-reward and termination
    probability observed on reaching step ``t+j``.  Works on floats, numpy
    arrays or tensors.
    """
    if n < 1:
        raise SegmentError("option_return needs n >= 1")
    if len(rewards) != n or len(betas) != n:
        raise SegmentError(f"option_return: expected {n} rewards and betas, got {len(rewards)} and {len(betas)}")
    raw = betas.data if isinstance(betas, Tensor) else np.asarray(betas, dtype=np.float64)
    if np.any(raw < 0) or np.any(raw > 1):
        raise SegmentError("option_return: betas must lie in [0, 1]")
    total = 0.0
    carry = 1.0
    for j in range(1, n + 1):
        keep = 1.0 - betas[j - 1]
        if running_product:
            carry = carry * keep
            weight = carry
        else:
            weight = keep ** j
        total = total + weight * rewards[j - 1]
    keep_last = 1.0 - betas[n - 1]
    boot_weight = carry * keep_last if running_product else keep_last ** (n + 1)
    return total + boot_weight * bootstrap


def manager_return(rewards: Sequence[float], n: int, gamma: float, cost: float, bootstrap: float,
                   switch_occurred: bool = True, phase: str = "train") -> float:
    """G^M = sum_j gamma^j r_j - gamma^n c + gamma^(n+1) v, cost in training only."""
    if n < 1:
        raise SegmentError("manager_return needs n >= 1")
    if len(rewards) != n:
        raise SegmentError(f"manager_return: expected {n} rewards, got {len(rewards)}")
    if cost < 0 or not 0 < gamma <= 1:
        raise SegmentError("manager_return needs cost >= 0 and gamma in (0, 1]")
    total = sum(gamma ** j * float(rewards[j - 1]) for j in range(1, n + 1))
    if switch_occurred and phase == "train":
        total -= gamma ** n * cost
    return total + gamma ** (n + 1) * float(bootstrap)


@dataclass
class SegmentBatch:
    """Segments flattened step-major with per-segment bookkeeping."""

    segments: List[TrajectorySegment]
    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    choices: np.ndarray
    task_ids: np.ndarray
    switches: np.ndarray
    terminations: np.ndarray
    dones: np.ndarray
    offsets: np.ndarray
    num_options: int

    @classmethod
    def from_segments(cls, segments: Sequence[TrajectorySegment]) -> "SegmentBatch":
        segments = list(segments)
        if not segments:
            raise SegmentError("empty segment list")
        k = segments[0].num_options
        if any(s.num_options != k for s in segments):
            raise SegmentError("segments disagree on the number of options")

        def cat(name: str) -> np.ndarray:
            return np.concatenate([getattr(s, name) for s in segments])

        lengths = [len(s) for s in segments]
        return cls(segments, cat("obs"), cat("next_obs"), cat("actions"), cat("rewards"), cat("choices"),
                   cat("task_ids"), cat("switches"), cat("terminations"), cat("dones"),
                   np.cumsum([0] + lengths[:-1]), k)

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def option_steps(self) -> np.ndarray:
        return np.nonzero(self.choices < self.num_options)[0]

    @property
    def decision_steps(self) -> np.ndarray:
        return np.nonzero(self.switches)[0]


def manager_targets(batch: SegmentBatch, next_values: np.ndarray, gamma: float, n_step: int,
                    cost: float) -> np.ndarray:
    """Windowed manager return from every step of the batch.

    The window runs up to ``n_step`` steps and stops at an episode end or the
    end of the segment.  The cost is charged at each manager re-decision
    inside the window, discounted by its offset; a single invocation gives
    exactly :func:`manager_return`.
    """
    if n_step < 1:
        raise SegmentError("n_step must be >= 1")
    targets = np.zeros(len(batch))
    for seg, offset in zip(batch.segments, batch.offsets):
        length = len(seg)
        for t in range(length):
            g, m, ended = 0.0, 0, False
            for u in range(t, min(t + n_step, length)):
                m += 1
                g += gamma ** m * seg.rewards[u]
                if seg.dones[u]:
                    ended = True
                    break
                if cost and seg.terminations[u]:
                    g -= gamma ** m * cost
            if not ended:
                g += gamma ** (m + 1) * next_values[offset + t + m - 1]
            targets[offset + t] = g
    return targets


@dataclass
class OptionWindows:
    starts: np.ndarray
    lengths: np.ndarray
    live: np.ndarray
    closes: np.ndarray


def option_windows(batch: SegmentBatch, steps: np.ndarray, n_step: int) -> OptionWindows:
    """One window per option step, running to the end of its invocation (at most ``n_step``).

    Positions index into ``steps``.  ``live`` is False when the window ends on
    an episode end; ``closes`` is True when it ends where the option stopped.
    """
    if n_step < 1:
        raise SegmentError("n_step must be >= 1")
    position = {int(s): i for i, s in enumerate(steps)}
    starts, lengths, live, closes = [], [], [], []
    for seg, offset in zip(batch.segments, batch.offsets):
        for inv in seg.invocations():
            if inv.choice >= seg.num_options:
                continue
            for t in range(inv.start, inv.end):
                n = min(inv.end - t, n_step)
                starts.append(position[int(offset + t)])
                lengths.append(n)
                live.append(not seg.dones[t + n - 1])
                closes.append(t + n == inv.end and inv.ended_by != "truncated")
    order = np.argsort(starts, kind="stable")
    return OptionWindows(np.asarray(starts, dtype=np.int64)[order], np.asarray(lengths, dtype=np.int64)[order],
                         np.asarray(live, dtype=bool)[order], np.asarray(closes, dtype=bool)[order])


def batched_option_returns(option_rewards: Tensor, betas: Tensor, windows: OptionWindows,
                           bootstrap: np.ndarray, running_product: bool = False) -> Tensor:
    """Vectorised :func:`option_return` for every window; differentiable in rewards and betas."""
    m = windows.starts.shape[0]
    nmax = int(windows.lengths.max())
    offs = np.arange(nmax)
    mask = offs[None, :] < windows.lengths[:, None]
    idx = np.where(mask, windows.starts[:, None] + offs[None, :], windows.starts[:, None])
    r = ad.getitem(option_rewards, idx)
    keep = 1.0 - ad.getitem(betas, idx)
    last = windows.starts + windows.lengths - 1
    keep_last = 1.0 - ad.getitem(betas, last)
    if running_product:
        carry = Tensor(np.ones(m))
        cols = []
        for j in range(nmax):
            carry = carry * keep[:, j]
            cols.append(carry)
        weights = ad.stack(cols, axis=1)
        boot_weight = ad.gather_last(weights, windows.lengths - 1) * keep_last
    else:
        exponents = np.broadcast_to(offs[None, :] + 1.0, (m, nmax))
        weights = ad.power(keep, exponents)
        boot_weight = ad.power(keep_last, windows.lengths + 1.0)
    summed = ad.tsum(weights * r * Tensor(mask.astype(np.float64)), axis=1)
    return summed + boot_weight * Tensor(bootstrap)


# --- inner updates -------------------------------------------------------------

@dataclass
class UpdateResult:
    params: ParamSet
    state: RmsPropState
    skipped: bool = False
    loss_policy: float = 0.0
    loss_value: float = 0.0
    entropy: float = 0.0
    step: Optional[StepInfo] = None
    stopped: Dict[str, np.ndarray] = field(default_factory=dict)


def policy_entropy(log_probs: Tensor) -> Tensor:
    return -ad.tsum(ad.exp(log_probs) * log_probs, axis=-1)


def check_option_heads(params: ParamSet, batch: SegmentBatch) -> None:
    heads = params.spec.head("policy").groups if params.spec is not None else None
    if heads != batch.num_options:
        raise SegmentError(f"option parameters have {heads} heads but segments use K={batch.num_options}")


def option_inputs(batch: SegmentBatch, steps: np.ndarray, eta_r: ParamSet, eta_beta: ParamSet) -> Tuple[Tensor, Tensor]:
    """Option-rewards and terminations of the active option on ``steps``."""
    ch = batch.choices[steps]
    rows = np.arange(steps.shape[0])
    rewards = option_reward_forward(eta_r, option_view(batch.obs[steps]))
    betas = option_termination_forward(eta_beta, option_view(batch.next_obs[steps]))
    return ad.getitem(rewards, (rows, ch, batch.actions[steps])), ad.getitem(betas, (rows, ch))


def inner_update_option(params: ParamSet, batch: SegmentBatch, eta_r: ParamSet, eta_beta: ParamSet,
                        settings: UpdateSettings, state: RmsPropState, differentiable: bool = False,
                        running_product: bool = False, preconditioner: Optional[Dict[str, np.ndarray]] = None,
                        clip_scale: Optional[float] = None,
                        stopped: Optional[Dict[str, np.ndarray]] = None) -> UpdateResult:
    """Actor-critic step of the option-policies on option-rewards.

    The advantage is constant in the option-policy parameters but keeps its
    dependence on the option-reward and termination parameters; with
    ``differentiable`` the update is recorded so the result can be
    differentiated with respect to them.

    The stopped value estimates (bootstrap values and the advantage
    baseline) are returned in ``UpdateResult.stopped``; passing them back via
    ``stopped`` replays an update with the same constants.
    """
    check_option_heads(params, batch)
    steps = batch.option_steps
    if steps.size == 0:
        logger.debug("option update skipped: no option steps in batch")
        return UpdateResult(params, state, skipped=True)
    rows = np.arange(steps.shape[0])
    ch = batch.choices[steps]

    if differentiable:
        r_o, betas = option_inputs(batch, steps, eta_r, eta_beta)
    else:
        with ad.no_grad():
            r_o, betas = option_inputs(batch, steps, eta_r, eta_beta)

    windows = option_windows(batch, steps, settings.n_step)
    if stopped is not None:
        bootstrap = np.asarray(stopped["bootstrap"], dtype=np.float64)
    else:
        with ad.no_grad():
            _, next_values = option_forward(params, option_view(batch.next_obs[steps]))
        last = windows.starts + windows.lengths - 1
        bootstrap = next_values.data[last, ch[last]] * windows.live
    returns = batched_option_returns(r_o, betas, windows, bootstrap, running_product)

    logits, values = option_forward(params, option_view(batch.obs[steps]))
    log_probs = ad.getitem(ad.log_softmax(logits), (rows, ch))
    log_pi = ad.gather_last(log_probs, batch.actions[steps])
    v = ad.getitem(values, (rows, ch))
    baseline = np.asarray(stopped["baseline"], dtype=np.float64) if stopped is not None else np.array(v.data)

    advantage = returns - Tensor(baseline)
    loss_policy = -ad.mean(advantage * log_pi)
    loss_value = settings.value_coef * ad.mean(0.5 * (returns - v) * (returns - v))
    entropy = ad.mean(policy_entropy(log_probs))
    loss = loss_policy + loss_value - settings.entropy_coef * entropy

    grads = ad.grad(loss, params.tensors(), create_graph=differentiable)
    new_params, new_state, info = rmsprop_step(params, grads, state, settings.lr, settings.clip_norm,
                                               differentiable=differentiable, preconditioner=preconditioner,
                                               clip_scale=clip_scale)
    return UpdateResult(new_params, new_state, False, loss_policy.item(), loss_value.item(), entropy.item(), info,
                        {"bootstrap": np.array(bootstrap), "baseline": baseline})


def manager_loss_terms(params: ParamSet, batch: SegmentBatch, settings: UpdateSettings, cost: float,
                       steps: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
    """(policy loss, value loss, entropy) of the manager on ``steps``."""
    with ad.no_grad():
        _, next_values = manager_forward(params, batch.next_obs, batch.task_ids)
    targets = manager_targets(batch, next_values.data, settings.gamma, settings.n_step, cost)[steps]
    logits, values = manager_forward(params, batch.obs[steps], batch.task_ids[steps])
    log_probs = ad.log_softmax(logits)
    log_pi = ad.gather_last(log_probs, batch.choices[steps])
    g = Tensor(targets)
    advantage = Tensor(targets - values.data)
    loss_policy = -ad.mean(advantage * log_pi)
    loss_value = settings.value_coef * ad.mean(0.5 * (g - values) * (g - values))
    return loss_policy, loss_value, ad.mean(policy_entropy(log_probs))


def switching_cost(cost: float, num_options: int, phase: str) -> float:
    """Cost actually charged: none at transfer and none without options."""
    return float(cost) if phase == "train" and num_options > 0 else 0.0


def inner_update_manager(params: ParamSet, batch: SegmentBatch, settings: UpdateSettings, state: RmsPropState,
                         cost: float = 0.0, phase: str = "train") -> UpdateResult:
    """Actor-critic step of the manager on its decision states."""
    steps = batch.decision_steps
    if steps.size == 0:
        logger.debug("manager update skipped: no decision states in batch")
        return UpdateResult(params, state, skipped=True)
    charged = switching_cost(cost, batch.num_options, phase)
    loss_policy, loss_value, entropy = manager_loss_terms(params, batch, settings, charged, steps)
    loss = loss_policy + loss_value - settings.entropy_coef * entropy
    grads = ad.grad(loss, params.tensors())
    new_params, new_state, info = rmsprop_step(params, grads, state, settings.lr, settings.clip_norm)
    return UpdateResult(new_params, new_state, False, loss_policy.item(), loss_value.item(), entropy.item(), info)


# --- meta update -------------------------------------------------------------

@dataclass
class MetaResult:
    eta_r: ParamSet
    eta_beta: ParamSet
    state_r: RmsPropState
    state_beta: RmsPropState
    objective: float = 0.0
    grad_norm: float = 0.0
    skipped: bool = False
    grads_r: List[np.ndarray] = field(default_factory=list)
    grads_beta: List[np.ndarray] = field(default_factory=list)


def validation_advantages(manager: ParamSet, batch: SegmentBatch, gamma: float, n_step: int, cost: float) -> np.ndarray:
    """G^M_t - v^M(s_t) for every validation step, as constants."""
    with ad.no_grad():
        _, values = manager_forward(manager, batch.obs, batch.task_ids)
        _, next_values = manager_forward(manager, batch.next_obs, batch.task_ids)
    return manager_targets(batch, next_values.data, gamma, n_step, cost) - values.data


def meta_objective(options: ParamSet, batch: SegmentBatch, advantages: np.ndarray) -> Tensor:
    """Mean over validation option steps of advantage * log pi^o(a|s; theta')."""
    steps = batch.option_steps
    rows = np.arange(steps.shape[0])
    logits, _ = option_forward(options, option_view(batch.obs[steps]))
    log_probs = ad.getitem(ad.log_softmax(logits), (rows, batch.choices[steps]))
    log_pi = ad.gather_last(log_probs, batch.actions[steps])
    return ad.mean(Tensor(advantages[steps]) * log_pi)


def meta_update(eta_r: ParamSet, eta_beta: ParamSet, options: ParamSet, manager: ParamSet, batch: SegmentBatch,
                state_r: RmsPropState, state_beta: RmsPropState, meta_lr: float, meta_clip: float = 1.0,
                gamma: float = 0.99, n_step: int = 20, cost: float = 0.0, phase: str = "train") -> MetaResult:
    """Ascends the validation objective in the option-reward and termination parameters."""
    if not options.is_differentiable:
        raise MetaGradientError("option parameters carry no recorded inner update")
    check_option_heads(options, batch)
    if batch.option_steps.size == 0:
        logger.warning("meta update skipped: validation rollout took no option steps")
        return MetaResult(eta_r, eta_beta, state_r, state_beta, skipped=True)

    charged = switching_cost(cost, batch.num_options, phase)
    advantages = validation_advantages(manager, batch, gamma, n_step, charged)
    objective = meta_objective(options, batch, advantages)
    n_r = len(eta_r)
    grads = ad.grad(-objective, eta_r.tensors() + eta_beta.tensors())
    norm = global_norm(grads)
    new_r, new_state_r, _ = rmsprop_step(eta_r, grads[:n_r], state_r, meta_lr, meta_clip, norm=norm)
    new_beta, new_state_beta, _ = rmsprop_step(eta_beta, grads[n_r:], state_beta, meta_lr, meta_clip, norm=norm)
    return MetaResult(new_r, new_beta, new_state_r, new_state_beta, objective.item(), norm,
                      False, [-g.data for g in grads[:n_r]], [-g.data for g in grads[n_r:]])
