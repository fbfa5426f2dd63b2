import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from modac.envs import (DEFAULT_TEST_GOALS, DEFAULT_TRAIN_GOALS, EnvError, GridLayout, GridWorld, LayoutError,
                        ProceduralGridWorld, build_env, four_rooms, load_layout_file, make_tasks, option_view,
                        procedural_rooms)

LAYOUT_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "layouts", "four_rooms.txt")


def test_four_rooms_shape_and_rooms():
    layout, train, test = four_rooms()
    assert (layout.height, layout.width) == (13, 13)
    assert len(layout.rooms) == 4
    assert len(layout.doorways) == 4
    assert {t.goal_cell for t in train}.isdisjoint({t.goal_cell for t in test})
    assert len(train) == len(DEFAULT_TRAIN_GOALS) and len(test) == len(DEFAULT_TEST_GOALS)


def test_layout_file_matches_builtin_layout():
    layout, train, test = load_layout_file(LAYOUT_PATH)
    builtin, btrain, btest = four_rooms()
    np.testing.assert_array_equal(layout.walls, builtin.walls)
    assert {t.goal_cell for t in train} == {t.goal_cell for t in btrain}
    assert {t.goal_cell for t in test} == {t.goal_cell for t in btest}


def test_overlapping_goal_sets_rejected():
    layout, _, _ = four_rooms()
    with pytest.raises(LayoutError):
        make_tasks(layout, [(1, 1)], [(1, 1)])


def test_goal_on_wall_rejected():
    layout, _, _ = four_rooms()
    with pytest.raises(LayoutError):
        make_tasks(layout, [(0, 0)], [(1, 1)])


def test_disconnected_layout_rejected():
    text = "#####\n#.#.#\n#####"
    with pytest.raises(LayoutError):
        GridLayout.from_text(text)


def test_observation_channels():
    env = build_env({"kind": "four_rooms"}, "train")
    obs = env.reset(0, np.random.default_rng(0))
    assert obs.shape == (3, 13, 13)
    assert obs[0].sum() == 1.0
    np.testing.assert_array_equal(obs[1], env.layout.layout_channel())
    gx, gy = env.tasks[0].goal_cell
    assert obs[2, gy, gx] == 1.0
    assert option_view(obs).shape == (2, 13, 13)


def test_walls_block_and_goal_terminates():
    layout = GridLayout.from_text("#####\n#...#\n#####", "corridor")
    train, _ = make_tasks(layout, [(3, 1)], [(1, 1)])
    env = GridWorld(layout, train, max_steps=10)
    env.reset(0, np.random.default_rng(0))
    env.state.agent_cell = (1, 1)
    _, reward, done = env.step(0)  # north is a wall
    assert env.state.agent_cell == (1, 1) and reward == 0.0 and not done
    env.step(1)
    _, reward, done = env.step(1)
    assert reward == 1.0 and done
    with pytest.raises(EnvError):
        env.step(1)


def test_time_limit():
    layout = GridLayout.from_text("#####\n#...#\n#####", "corridor")
    train, _ = make_tasks(layout, [(3, 1)], [(1, 1)])
    env = GridWorld(layout, train, max_steps=3)
    env.reset(0, np.random.default_rng(0))
    env.state.agent_cell = (1, 1)
    dones = [env.step(3)[2] for _ in range(3)]
    assert dones == [False, False, True]


def test_spawn_never_on_goal():
    env = build_env({"kind": "four_rooms"}, "test")
    rng = np.random.default_rng(0)
    for i in range(50):
        env.reset(i % env.num_tasks, rng)
        assert env.state.agent_cell != env.state.task.goal_cell


@pytest.mark.parametrize("difficulty, size", [("simple", 13), ("hard", 21)])
def test_procedural_rooms_reachable(difficulty, size):
    for seed in range(10):
        layout, tasks = procedural_rooms(difficulty, seed)
        assert layout.walls.shape == (size, size)
        reachable = layout.reachable_from(layout.open_cells[0])
        assert all(t.goal_cell in reachable for t in tasks)
        assert [t.task_id for t in tasks] == [0, 1, 2, 3]


def test_procedural_layouts_are_seeded():
    a, _ = procedural_rooms("hard", 7)
    b, _ = procedural_rooms("hard", 7)
    np.testing.assert_array_equal(a.walls, b.walls)


def test_procedural_observations_padded():
    env = ProceduralGridWorld("simple", obs_size=21)
    obs = env.reset(2, np.random.default_rng(1))
    assert obs.shape == (2, 21, 21)
    assert np.all(obs[1, 13:, :] == 1.0)
