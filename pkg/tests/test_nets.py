import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac import autodiff as ad
from modac.nets import (NetworkInputError, OptimizerError, ParamSet, RmsPropState, init_params, manager_forward,
                        manager_spec, option_forward, option_policy_spec, option_reward_forward, option_reward_spec,
                        option_termination_forward, option_termination_spec, rmsprop_step)
from modac.utils import derive_rng

GRID = (7, 7)


def _obs(n, channels, grid=GRID, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n, channels) + grid).astype(np.float64)


def test_manager_output_shapes():
    params = init_params(manager_spec(3, 4, GRID, filters=4, dense=8), derive_rng(0, "m"))
    logits, values = manager_forward(params, _obs(5, 3))
    assert logits.shape == (5, 7)
    assert values.shape == (5,)


def test_option_heads_and_ranges():
    torso = {"filters": 4, "dense": 8}
    theta = init_params(option_policy_spec(2, 4, GRID, **torso), derive_rng(0, "o"))
    eta_r = init_params(option_reward_spec(2, 4, GRID, **torso), derive_rng(0, "r"))
    eta_b = init_params(option_termination_spec(2, GRID, **torso), derive_rng(0, "b"))
    obs = _obs(6, 2)
    logits, values = option_forward(theta, obs)
    assert logits.shape == (6, 2, 4) and values.shape == (6, 2)
    rewards = option_reward_forward(eta_r, obs).data
    assert rewards.shape == (6, 2, 4)
    assert np.all(np.abs(rewards) < np.pi / 2)
    betas = option_termination_forward(eta_b, obs).data
    assert betas.shape == (6, 2)
    assert np.all((betas > 0) & (betas < 1))


def test_option_networks_reject_goal_channel():
    theta = init_params(option_policy_spec(2, 4, GRID, filters=4, dense=8), derive_rng(0, "o"))
    with pytest.raises(NetworkInputError):
        option_forward(theta, _obs(2, 3))


def test_option_networks_need_options():
    with pytest.raises(ValueError):
        option_policy_spec(0, 4, GRID)


def test_task_embedding_requires_ids():
    spec = manager_spec(2, 4, GRID, in_channels=2, num_tasks=4, task_embedding=3, torso="mlp", mlp_hidden=(8,))
    params = init_params(spec, derive_rng(0, "m"))
    with pytest.raises(NetworkInputError):
        manager_forward(params, _obs(2, 2))
    logits, _ = manager_forward(params, _obs(2, 2), task_ids=[0, 3])
    assert logits.shape == (2, 6)


def test_init_is_deterministic_per_stream():
    spec = option_policy_spec(2, 4, GRID, torso="mlp", mlp_hidden=(5,))
    a = init_params(spec, derive_rng(1, "init", "option_policy"))
    b = init_params(spec, derive_rng(1, "init", "option_policy"))
    c = init_params(spec, derive_rng(2, "init", "option_policy"))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert all(np.all(a[n].data == 0) for n in a if n.endswith(".b"))


def test_flatten_unflatten_preserves_values():
    params = init_params(option_termination_spec(2, GRID, torso="mlp", mlp_hidden=(3,)), derive_rng(0, "b"))
    restored = params.unflatten(params.flatten())
    assert restored.digest() == params.digest()
    with pytest.raises(ValueError):
        params.unflatten(np.zeros(3))


def test_rmsprop_step_matches_closed_form():
    p = ParamSet("baseline", {"w": ad.Tensor(np.array([1.0, -1.0]), requires_grad=True)})
    state = RmsPropState.zeros(p, decay=0.99, epsilon=0.01)
    g = np.array([0.5, -2.0])
    new, new_state, info = rmsprop_step(p, [g], state, lr=0.1, clip_norm=40.0)
    acc = 0.01 * g * g
    np.testing.assert_allclose(new_state.accumulators["w"], acc)
    np.testing.assert_allclose(new["w"].data, p["w"].data - 0.1 * g / np.sqrt(acc + 0.01))
    assert info.clip_scale == 1.0


def test_rmsprop_clips_global_norm():
    p = ParamSet("baseline", {"w": ad.Tensor(np.zeros(2), requires_grad=True)})
    _, state, info = rmsprop_step(p, [np.array([30.0, 40.0])], RmsPropState.zeros(p), lr=0.1, clip_norm=5.0)
    assert info.grad_norm == pytest.approx(50.0)
    assert info.clip_scale == pytest.approx(0.1)
    np.testing.assert_allclose(state.accumulators["w"], 0.01 * np.array([3.0, 4.0]) ** 2)


def test_rmsprop_rejects_non_finite_gradients():
    p = ParamSet("baseline", {"w": ad.Tensor(np.zeros(2), requires_grad=True)})
    with pytest.raises(OptimizerError):
        rmsprop_step(p, [np.array([np.nan, 0.0])], RmsPropState.zeros(p), lr=0.1, clip_norm=1.0)


def test_differentiable_step_keeps_graph():
    w = ad.Tensor(np.array([0.2, 0.4]), requires_grad=True)
    eta = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p = ParamSet("option_policy", {"w": w})
    (g,) = ad.grad(ad.tsum(w * eta), [w], create_graph=True)
    new, _, _ = rmsprop_step(p, [g], RmsPropState.zeros(p), lr=0.1, clip_norm=40.0, differentiable=True)
    assert new.is_differentiable
    (d_eta,) = ad.grad(ad.tsum(new["w"]), [eta])
    assert np.all(d_eta.data < 0)


def test_rmsprop_without_decay_or_epsilon_steps_by_sign():
    p = ParamSet("baseline", {"w": ad.Tensor(np.array([1.0, -1.0]), requires_grad=True)})
    state = RmsPropState.zeros(p, decay=0.0, epsilon=0.0)
    new, _, info = rmsprop_step(p, [np.array([0.3, -7.0])], state, lr=0.1, clip_norm=40.0)
    assert info.clip_scale == 1.0
    np.testing.assert_allclose(new["w"].data, [0.9, -0.9])
    # a zero gradient leaves the coordinate in place
    zero, _, _ = rmsprop_step(p, [np.array([0.0, 2.0])], state, lr=0.1, clip_norm=40.0)
    np.testing.assert_allclose(zero["w"].data, [1.0, -1.1])
