import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac.agent import (Actor, ActorPool, AgentParams, HierarchicalAgent, decode_choice, export_trajectory_csv,
                         option_arrow_map, option_usage_stats)
from modac.envs import NUM_ACTIONS, build_env
from modac.nets import (ParamSet, init_params, manager_spec, option_policy_spec, option_reward_spec,
                        option_termination_spec)
from modac.utils import derive_rng

TORSO = {"torso": "mlp", "mlp_hidden": (8,)}
GRID = (13, 13)


def _params(k, seed=0, manager_bias=None):
    manager = init_params(manager_spec(k, NUM_ACTIONS, GRID, 3, **TORSO), derive_rng(seed, "m"))
    if manager_bias is not None:
        arrays = manager.arrays()
        arrays["head.policy.b"] = arrays["head.policy.b"] + manager_bias
        manager = ParamSet("manager", list(arrays.items()), manager.spec)
    if k == 0:
        return AgentParams(manager)
    return AgentParams(manager,
                       init_params(option_policy_spec(k, NUM_ACTIONS, GRID, **TORSO), derive_rng(seed, "o")),
                       init_params(option_reward_spec(k, NUM_ACTIONS, GRID, **TORSO), derive_rng(seed, "r")),
                       init_params(option_termination_spec(k, GRID, **TORSO), derive_rng(seed, "b")))


def _actors(n, seed=0, phase="train"):
    return [Actor(build_env({"kind": "four_rooms"}, phase), derive_rng(seed, "actor", i)) for i in range(n)]


def test_decode_choice():
    assert decode_choice(1, 3) == ("option", 1)
    assert decode_choice(3, 3) == ("primitive", 0)
    with pytest.raises(ValueError):
        decode_choice(7, 3)


def test_flat_agent_decides_every_step():
    agent = HierarchicalAgent(0)
    segments = agent.act(_params(0), _actors(2), 15)
    for seg in segments:
        assert seg.switches.all() and seg.terminations.all()
        np.testing.assert_array_equal(seg.actions, seg.choices)


def test_options_execute_until_termination():
    # bias the manager towards option 0
    bias = np.array([8.0, -8.0] + [-8.0] * NUM_ACTIONS)
    agent = HierarchicalAgent(2)
    segments = agent.act(_params(2, manager_bias=bias), _actors(3), 30)
    for seg in segments:
        assert seg.switches[0]
        for t in range(1, len(seg)):
            # a new decision happens exactly after a termination
            assert seg.switches[t] == seg.terminations[t - 1]
        for inv in seg.invocations():
            assert np.all(seg.choices[inv.start:inv.end] == inv.choice)


def test_fixed_duration_options():
    bias = np.array([8.0] + [-8.0] * NUM_ACTIONS)
    agent = HierarchicalAgent(1, termination="fixed", duration=4)
    params = _params(1, manager_bias=bias)
    params = AgentParams(params.manager, params.options)
    seg = agent.act(params, _actors(1), 40)[0]
    closed = [inv for inv in seg.invocations() if inv.ended_by not in ("episode_end", "truncated")]
    assert closed
    for inv in closed:
        assert inv.choice == 0 and inv.length == 4


def test_options_required_when_k_positive():
    agent = HierarchicalAgent(2)
    with pytest.raises(ValueError):
        agent.act(AgentParams(_params(2).manager), _actors(1), 5)


def test_rollout_is_seeded():
    params = _params(2)
    a = HierarchicalAgent(2).act(params, _actors(2, seed=4), 25)
    b = HierarchicalAgent(2).act(params, _actors(2, seed=4), 25)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.actions, sb.actions)
        np.testing.assert_array_equal(sa.choices, sb.choices)


def test_threaded_pool_matches_serial():
    params = _params(2)
    serial = ActorPool(_actors(4, seed=2), groups=2, deterministic=True)
    threaded = ActorPool(_actors(4, seed=2), groups=2, deterministic=False)
    agent = HierarchicalAgent(2)
    for sa, sb in zip(serial.rollout(agent, params, 20), threaded.rollout(agent, params, 20)):
        np.testing.assert_array_equal(sa.actions, sb.actions)


def test_usage_stats():
    bias = np.array([8.0, -8.0] + [-8.0] * NUM_ACTIONS)
    segments = HierarchicalAgent(2).act(_params(2, manager_bias=bias), _actors(2), 30)
    usage = option_usage_stats(segments)
    assert usage.histogram.shape == (2 + NUM_ACTIONS,)
    assert usage.histogram.sum() == pytest.approx(1.0)
    assert usage.length_defined and usage.mean_option_length >= 1.0
    assert 0.0 < usage.option_fraction <= 1.0


def test_usage_without_options():
    usage = option_usage_stats(HierarchicalAgent(0).act(_params(0), _actors(1), 10))
    assert not usage.length_defined
    assert usage.mean_option_length == 0.0
    assert usage.option_fraction == 0.0


def test_trajectory_export(tmp_path):
    seg = HierarchicalAgent(2).act(_params(2), _actors(1), 12)[0]
    path = export_trajectory_csv(seg, tmp_path / "trajectory.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "step,x,y,action,reward,active_option"
    assert len(lines) == 13


def test_arrow_map_covers_open_cells():
    params = _params(2)
    env = build_env({"kind": "four_rooms"})
    arrows = option_arrow_map(params.options, params.terminations, env.layout)
    assert sorted(arrows) == [0, 1]
    assert len(arrows[0]) == len(env.layout.open_cells)
    for x, y, action, beta in arrows[1]:
        assert 0 <= action < NUM_ACTIONS
        assert 0.0 < beta < 1.0


def test_usage_hand_count():
    from test_returns import _segment

    # option 0 for three steps, then two primitive steps
    seg = _segment([0, 0, 0, 1, 2], [False, False, True, True, True], [False] * 5, [0.0] * 5, k=1)
    usage = option_usage_stats([seg])
    assert usage.histogram[0] == pytest.approx(1 / 3)
    assert usage.mean_option_length == pytest.approx(3.0)
    assert usage.option_fraction == pytest.approx(3 / 5)
    assert usage.selection_fraction == pytest.approx(1 / 3)


def test_manager_queried_once_per_decision():
    bias = np.array([8.0, -8.0] + [-8.0] * NUM_ACTIONS)
    params = _params(2, manager_bias=bias)
    agent = HierarchicalAgent(2)
    segments = agent.act(params, _actors(3), 30)
    assert agent.manager_queries == sum(int(seg.switches.sum()) for seg in segments)


def test_pool_query_count_independent_of_threads():
    params = _params(2)
    serial_agent, threaded_agent = HierarchicalAgent(2), HierarchicalAgent(2)
    serial = ActorPool(_actors(4, seed=3), groups=2, deterministic=True).rollout(serial_agent, params, 20)
    ActorPool(_actors(4, seed=3), groups=2, deterministic=False).rollout(threaded_agent, params, 20)
    assert serial_agent.manager_queries == threaded_agent.manager_queries
    assert serial_agent.manager_queries == sum(int(seg.switches.sum()) for seg in serial)
