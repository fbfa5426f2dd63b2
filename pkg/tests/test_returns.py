import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac import autodiff as ad
from modac.agent import TrajectorySegment
from modac.metalearn import (SegmentBatch, SegmentError, batched_option_returns, manager_return, manager_targets,
                             option_return, option_windows)
from modac.selftest import brute_manager_return, brute_option_return, check_returns


def test_option_return_literal_powers():
    rewards = np.array([0.5, -0.25, 1.0])
    betas = np.array([0.1, 0.2, 0.4])
    expected = 0.9 * 0.5 + 0.8 ** 2 * -0.25 + 0.6 ** 3 * 1.0 + 0.6 ** 4 * 2.0
    assert option_return(rewards, betas, 3, 2.0) == pytest.approx(expected, abs=1e-14)


def test_option_return_running_product():
    rewards = np.array([1.0, 1.0])
    betas = np.array([0.5, 0.25])
    expected = 0.5 * 1.0 + 0.5 * 0.75 * 1.0 + 0.5 * 0.75 * 0.75 * 4.0
    assert option_return(rewards, betas, 2, 4.0, running_product=True) == pytest.approx(expected)


def test_option_return_terminal_beta_drops_bootstrap():
    assert option_return([0.3], [1.0], 1, 100.0) == pytest.approx(0.0)


def test_option_return_validates_inputs():
    with pytest.raises(SegmentError):
        option_return([0.1], [1.5], 1, 0.0)
    with pytest.raises(SegmentError):
        option_return([0.1, 0.2], [0.5], 2, 0.0)
    with pytest.raises(SegmentError):
        option_return([], [], 0, 0.0)


def test_option_return_differentiable_in_betas():
    betas = ad.Tensor(np.array([0.3, 0.6]), requires_grad=True)
    rewards = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    g = option_return(rewards, betas, 2, 0.5)
    gb, gr = ad.grad(g, [betas, rewards])
    np.testing.assert_allclose(gr.data, [0.7, 0.4 ** 2])
    # d/d beta_2 of 0.4^2 * 2 + 0.4^3 * 0.5
    assert gb.data[1] == pytest.approx(-2 * 0.4 * 2.0 - 3 * 0.4 ** 2 * 0.5)


def test_manager_return_formula():
    rewards = [0.0, 0.0, 1.0]
    got = manager_return(rewards, 3, 0.9, 0.05, 2.0)
    assert got == pytest.approx(0.9 ** 3 - 0.9 ** 3 * 0.05 + 0.9 ** 4 * 2.0)


def test_manager_return_no_cost_at_transfer():
    assert manager_return([1.0], 1, 0.5, 0.3, 0.0, phase="transfer") == pytest.approx(0.5)
    assert manager_return([1.0], 1, 0.5, 0.3, 0.0, switch_occurred=False) == pytest.approx(0.5)


def test_returns_match_brute_force():
    rng = np.random.default_rng(11)
    for n in range(1, 21):
        r, b, v = rng.uniform(-1.5, 1.5, n), rng.uniform(0, 1, n), float(rng.normal())
        assert abs(option_return(r, b, n, v) - brute_option_return(r, b, v)) <= 1e-12
        tr = rng.choice([0.0, 1.0], size=n)
        assert abs(manager_return(tr, n, 0.99, 0.05, v) - brute_manager_return(tr, 0.99, 0.05, v)) <= 1e-12


def test_selftest_return_checks():
    assert all(r.passed for r in check_returns(trials=200, seed=3))


def _segment(choices, terminations, dones, rewards, k=1):
    n = len(choices)
    zeros = np.zeros(n)
    switches = np.zeros(n, dtype=bool)
    switches[0] = True
    switches[1:] = np.asarray(terminations[:-1], dtype=bool)
    return TrajectorySegment(
        obs=np.zeros((n, 3, 3, 3)), next_obs=np.zeros((n, 3, 3, 3)), actions=np.zeros(n, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64), option_rewards=zeros, betas=zeros + 0.5,
        terminations=np.asarray(terminations, dtype=bool), choices=np.asarray(choices, dtype=np.int64),
        task_ids=np.zeros(n, dtype=np.int64), switches=switches, dones=np.asarray(dones, dtype=bool),
        cells=np.zeros((n, 2), dtype=np.int64), num_options=k)


def test_manager_targets_single_invocation_equals_manager_return():
    seg = _segment([0, 0, 0, 1], [False, False, True, True], [False] * 4, [0.0, 0.0, 1.0, 0.0])
    batch = SegmentBatch.from_segments([seg])
    next_values = np.array([0.0, 0.0, 3.0, 5.0])
    targets = manager_targets(batch, next_values, gamma=0.9, n_step=3, cost=0.05)
    assert targets[0] == pytest.approx(manager_return([0.0, 0.0, 1.0], 3, 0.9, 0.05, 3.0))


def test_manager_targets_stop_at_episode_end():
    seg = _segment([1, 1, 1], [True, True, True], [False, True, False], [0.0, 1.0, 0.0])
    batch = SegmentBatch.from_segments([seg])
    targets = manager_targets(batch, np.full(3, 10.0), gamma=0.5, n_step=5, cost=0.0)
    assert targets[0] == pytest.approx(0.5 ** 2)
    assert targets[1] == pytest.approx(0.5)


def test_option_windows_follow_invocations():
    seg = _segment([0, 0, 0, 1, 0, 0], [False, False, True, True, False, False], [False] * 6, [0.0] * 6)
    batch = SegmentBatch.from_segments([seg])
    windows = option_windows(batch, batch.option_steps, n_step=20)
    np.testing.assert_array_equal(windows.lengths, [3, 2, 1, 2, 1])
    np.testing.assert_array_equal(windows.closes, [True, True, True, False, False])


def test_batched_returns_match_scalar_form():
    seg = _segment([0, 0, 0, 0], [False, False, False, True], [False] * 4, [0.0] * 4)
    batch = SegmentBatch.from_segments([seg])
    steps = batch.option_steps
    windows = option_windows(batch, steps, n_step=3)
    r = np.array([0.1, -0.4, 0.7, 0.2])
    b = np.array([0.2, 0.5, 0.1, 0.9])
    boot = np.array([1.0, 2.0, 3.0, 4.0])
    out = batched_option_returns(ad.Tensor(r), ad.Tensor(b), windows, boot).data
    for i, (start, n) in enumerate(zip(windows.starts, windows.lengths)):
        expected = option_return(r[start:start + n], b[start:start + n], int(n), boot[i])
        assert out[i] == pytest.approx(expected)


@pytest.mark.parametrize("rewards, betas, bootstrap, expected", [
    ([0.5, 0.25], [0.0, 0.0], 1.0, 1.75),
    ([1.0, 1.0], [0.5, 0.5], 2.0, 1.0),
    ([1.0, 1.0], [1.0, 1.0], 3.0, 0.0),
])
def test_option_return_worked_examples(rewards, betas, bootstrap, expected):
    assert option_return(rewards, betas, 2, bootstrap) == pytest.approx(expected)


def test_manager_return_worked_example():
    assert manager_return([0.0, 1.0], 2, 0.9, 0.05, 0.5) == pytest.approx(1.134)
    # the cost is the only difference between paired evaluations
    diff = manager_return([0.0, 1.0], 2, 0.9, 0.0, 0.5) - manager_return([0.0, 1.0], 2, 0.9, 0.05, 0.5)
    assert diff == pytest.approx(0.81 * 0.05)
