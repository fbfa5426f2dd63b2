# -*- coding: utf-8 -*-
"""
Self-checks run by ``main.py selftest``.

* first and second order gradients against central finite differences;
* option and manager returns against literal brute-force sums;
* the meta-gradient of the validation objective against finite differences
  of the whole composite (inner option updates followed by the objective),
  on networks small enough to perturb every parameter;
* the hierarchical learner without options against the flat learner.

Finite differences replay the preconditioner, clip scale and stopped value
estimates of the differentiated run, which the meta-gradient treats as
constants.
"""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from modac import autodiff as ad
from modac.agent import Actor, AgentParams, HierarchicalAgent
from modac.autodiff import Tensor
from modac.bootstrap import ExperimentConfig
from modac.envs import NUM_ACTIONS, GridLayout, GridWorld, make_tasks
from modac.metalearn import (SegmentBatch, UpdateSettings, inner_update_option, manager_return, meta_objective,
                             meta_update, option_return, validation_advantages)
from modac.nets import (ParamSet, RmsPropState, init_params, manager_spec, option_policy_spec, option_reward_spec,
                        option_termination_spec)
from modac.utils import derive_rng, get_logger

logger = get_logger("modac.selftest")

TINY_GRID = """\
#####
#...#
#...#
#...#
#####"""
TINY_TORSO = {"torso": "mlp", "mlp_hidden": (2,), "activation": "tanh"}
META_TOLERANCE = 1e-4
RETURN_TOLERANCE = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float = float("nan")
    detail: str = ""


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        out.flat[i] = (f(x + step) - f(x - step)) / (2 * h)
    return out


# --- autodiff ---------------------------------------------------------------------

def _sample_function(seed: int) -> Tuple[Callable[[Tensor], Tensor], np.ndarray]:
    """A scalar function of one vector mixing the ops the networks use."""
    rng = derive_rng(seed, "selftest", "sample")
    x = rng.normal(size=(5, 3))
    img = rng.normal(size=(2, 1, 4, 4))
    idx = rng.integers(0, 4, size=5)

    def f(w: Tensor) -> Tensor:
        a = ad.reshape(ad.getitem(w, slice(0, 12)), (3, 4))
        k = ad.reshape(ad.getitem(w, slice(12, 16)), (1, 1, 2, 2))
        b = ad.getitem(w, slice(16, 17))
        h = ad.tanh(ad.matmul(Tensor(x), a))
        pick = ad.mean(ad.gather_last(ad.log_softmax(h * 1.5), idx))
        conv = ad.mean(ad.sigmoid(ad.conv2d(Tensor(img), k, b, padding="same")) ** 2)
        return pick + conv + ad.mean(ad.arctan(h)) * ad.exp(ad.tsum(a) * 0.1)

    return f, rng.normal(size=17) * 0.5


def check_autodiff(seed: int = 0) -> List[CheckResult]:
    f, w0 = _sample_function(seed)

    def value(w: np.ndarray) -> float:
        with ad.no_grad():
            return f(Tensor(w)).item()

    w = Tensor(w0, requires_grad=True)
    (g,) = ad.grad(f(w), [w])
    first = relative_error(g.data, central_difference(value, w0))

    direction = derive_rng(seed, "selftest", "direction").normal(size=w0.shape)

    def directional(wv: np.ndarray) -> np.ndarray:
        t = Tensor(wv, requires_grad=True)
        (gt,) = ad.grad(f(t), [t])
        return gt.data

    w = Tensor(w0, requires_grad=True)
    (g,) = ad.grad(f(w), [w], create_graph=True)
    (hv,) = ad.grad(ad.tsum(g * Tensor(direction)), [w])
    h = 1e-5
    fd_hv = (directional(w0 + h * direction) - directional(w0 - h * direction)) / (2 * h)
    second = relative_error(hv.data, fd_hv)
    return [CheckResult("autodiff first order", first < 1e-6, first),
            CheckResult("autodiff second order", second < 1e-5, second)]


# --- returns --------------------------------------------------------------------------

def brute_option_return(rewards: np.ndarray, betas: np.ndarray, bootstrap: float) -> float:
    n = len(rewards)
    total = 0.0
    for j in range(1, n + 1):
        weight = 1.0
        for _ in range(j):
            weight *= 1.0 - betas[j - 1]
        total += weight * rewards[j - 1]
    weight = 1.0
    for _ in range(n + 1):
        weight *= 1.0 - betas[n - 1]
    return total + weight * bootstrap


def brute_manager_return(rewards: np.ndarray, gamma: float, cost: float, bootstrap: float) -> float:
    n = len(rewards)
    total = 0.0
    for j in range(1, n + 1):
        discount = 1.0
        for _ in range(j):
            discount *= gamma
        total += discount * rewards[j - 1]
    return total - gamma ** n * cost + gamma ** (n + 1) * bootstrap


def check_returns(trials: int = 1000, seed: int = 0) -> List[CheckResult]:
    rng = derive_rng(seed, "selftest", "returns")
    worst_o = worst_m = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 21))
        rewards = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
        betas = rng.uniform(0, 1, size=n)
        v = float(rng.normal())
        worst_o = max(worst_o, abs(option_return(rewards, betas, n, v) - brute_option_return(rewards, betas, v)))
        task_rewards = rng.choice([0.0, 1.0], size=n, p=[0.9, 0.1])
        gamma, cost = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0, 0.1))
        got = manager_return(task_rewards, n, gamma, cost, v)
        worst_m = max(worst_m, abs(got - brute_manager_return(task_rewards, gamma, cost, v)))
    return [CheckResult("option return oracle", worst_o <= RETURN_TOLERANCE, worst_o),
            CheckResult("manager return oracle", worst_m <= RETURN_TOLERANCE, worst_m)]


# --- meta-gradient -------------------------------------------------------------------------

@dataclass
class MetaProblem:
    manager: ParamSet
    theta: ParamSet
    eta_r: ParamSet
    eta_beta: ParamSet
    train: List[SegmentBatch]
    validation: SegmentBatch
    settings: UpdateSettings
    cost: float = 0.05


def tiny_world(max_steps: int = 8) -> GridWorld:
    layout = GridLayout.from_text(TINY_GRID, "tiny")
    train, _ = make_tasks(layout, [(3, 3), (1, 3)], [(1, 1)])
    return GridWorld(layout, train, max_steps)


def build_meta_problem(num_options: int, inner_steps: int, seed: int = 0, num_actors: int = 3,
                       unroll: int = 8) -> MetaProblem:
    """Tanh MLP networks on a 5x5 grid and fixed rollouts for every inner step plus validation."""
    world = tiny_world()
    grid = world.obs_grid
    k, a = num_options, NUM_ACTIONS
    manager = init_params(manager_spec(k, a, grid, world.obs_channels, **TINY_TORSO), derive_rng(seed, "st", "m"))
    arrays = manager.arrays()
    arrays["head.policy.b"][:k] += 2.0
    manager = ParamSet(manager.role, [(n, Tensor(v, requires_grad=True)) for n, v in arrays.items()], manager.spec)
    theta = init_params(option_policy_spec(k, a, grid, **TINY_TORSO), derive_rng(seed, "st", "o"))
    eta_r = init_params(option_reward_spec(k, a, grid, **TINY_TORSO), derive_rng(seed, "st", "r"))
    eta_beta = init_params(option_termination_spec(k, grid, **TINY_TORSO), derive_rng(seed, "st", "b"))

    agent = HierarchicalAgent(k, a)
    actors = [Actor(tiny_world(), derive_rng(seed, "st", "actor", i)) for i in range(num_actors)]
    params = AgentParams(manager, theta, eta_r, eta_beta).snapshot()
    batches = []
    for _ in range(20 * (inner_steps + 1)):
        batch = SegmentBatch.from_segments(agent.act(params, actors, unroll))
        if batch.option_steps.size:
            batches.append(batch)
        if len(batches) == inner_steps + 1:
            break
    else:
        raise RuntimeError("could not collect rollouts with option steps for the meta-gradient check")
    return MetaProblem(manager, theta, eta_r, eta_beta, batches[:-1], batches[-1],
                       UpdateSettings(lr=0.05, n_step=unroll))


def meta_gradient_check(num_options: int, inner_steps: int, seed: int = 0, h: float = 1e-6) -> CheckResult:
    p = build_meta_problem(num_options, inner_steps, seed)
    eta_r, eta_beta = p.eta_r.detached(), p.eta_beta.detached()
    theta = p.theta.detached()
    state = RmsPropState.zeros(theta)
    replay = []
    with ad.Tape():
        for batch in p.train:
            res = inner_update_option(theta, batch, eta_r, eta_beta, p.settings, state, differentiable=True)
            replay.append((res.step.preconditioner, res.step.clip_scale, res.stopped))
            theta, state = res.params, res.state
        meta = meta_update(eta_r, eta_beta, theta, p.manager, p.validation, RmsPropState.zeros(eta_r),
                           RmsPropState.zeros(eta_beta), meta_lr=0.0, gamma=p.settings.gamma,
                           n_step=p.settings.n_step, cost=p.cost)
    analytic = np.concatenate([g.ravel() for g in meta.grads_r + meta.grads_beta])
    advantages = validation_advantages(p.manager, p.validation, p.settings.gamma, p.settings.n_step, p.cost)
    n_r = p.eta_r.num_parameters

    def composite(vector: np.ndarray) -> float:
        r = p.eta_r.unflatten(vector[:n_r], requires_grad=False)
        b = p.eta_beta.unflatten(vector[n_r:], requires_grad=False)
        th, st = p.theta.detached(), RmsPropState.zeros(p.theta)
        for batch, (pre, scale, stopped) in zip(p.train, replay):
            res = inner_update_option(th, batch, r, b, p.settings, st, preconditioner=pre, clip_scale=scale,
                                      stopped=stopped)
            th, st = res.params, res.state
        with ad.no_grad():
            return meta_objective(th, p.validation, advantages).item()

    x0 = np.concatenate([p.eta_r.flatten(), p.eta_beta.flatten()])
    numeric = central_difference(composite, x0, h)
    err = relative_error(analytic, numeric)
    name = f"meta-gradient K={num_options} L={inner_steps}"
    return CheckResult(name, err <= META_TOLERANCE, err, f"{x0.size} meta-parameters")


# --- flat equivalence ----------------------------------------------------------------------------

def flat_equivalence_check(frames: int = 50000, seed: int = 0) -> CheckResult:
    from modac.harness import metrics_equal, write_metrics
    from modac.trainer import FlatLearner, ModacLearner

    base = {
        "experiment": {"name": "equivalence", "agent": "modac", "seed": seed},
        "agent": {"num_options": 0, "num_actors": 2, "n_step": 5, "switching_cost": 0.05},
        "network": {"torso": "mlp", "mlp_hidden": [8]},
        "budget": {"train_frames": frames, "log_every_frames": max(frames // 4, 10)},
    }
    modac_cfg = ExperimentConfig.from_dict(base)
    flat_cfg = modac_cfg.with_override("experiment.agent", "flat")
    with tempfile.TemporaryDirectory() as tmp:
        a = write_metrics(Path(tmp) / "modac.csv", ModacLearner(modac_cfg, "train").run(), "modac")
        b = write_metrics(Path(tmp) / "flat.csv", FlatLearner(flat_cfg, "train").run(), "flat")
        same = metrics_equal(a, b)
    return CheckResult("K=0 learner equals flat learner", same, float(same), f"{frames} frames")


def run_selftest(console: Optional[Console] = None, quick: bool = False) -> bool:
    """Runs every check, prints a table and returns True when all pass."""
    console = console or Console()
    steps: List[Callable[[], List[CheckResult]]] = [
        check_autodiff,
        lambda: check_returns(100 if quick else 1000),
    ]
    for k in (1, 2):
        for inner in ((1,) if quick else (1, 5)):
            steps.append(lambda k=k, inner=inner: [meta_gradient_check(k, inner)])
    steps.append(lambda: [flat_equivalence_check(400 if quick else 50000)])

    results: List[CheckResult] = []
    for step in steps:
        try:
            results.extend(step())
        except Exception as exc:  # a crashing check is a failed check
            logger.exception("selftest step failed")
            results.append(CheckResult(getattr(step, "__name__", "check"), False, detail=f"{type(exc).__name__}: {exc}"))

    table = Table(title="MODAC self-test")
    table.add_column("Check", style="cyan")
    table.add_column("Value", justify="right")
    table.add_column("Result")
    table.add_column("Detail", style="dim")
    for r in results:
        table.add_row(r.name, f"{r.value:.3g}", "[green]pass[/green]" if r.passed else "[red]FAIL[/red]", r.detail)
    console.print(table)
    return all(r.passed for r in results)
