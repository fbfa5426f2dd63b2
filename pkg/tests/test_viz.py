import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

pytest.importorskip("matplotlib")

from modac.envs import four_rooms
from modac.harness import OPTION_MAP_COLUMNS, train_phase, write_csv
from modac.viz import (VizError, plot_learning_curves, plot_option_maps, plot_trajectory, plot_usage_histograms,
                       render_checkpoint, render_run)
from test_harness import tiny_config


@pytest.fixture
def layout_file(tmp_path):
    layout, _, _ = four_rooms()
    path = tmp_path / "layout.txt"
    path.write_text(layout.to_text() + "\n")
    return path, layout


def test_always_north_option_map(tmp_path, layout_file):
    path, layout = layout_file
    rows = [{"option": o, "x": x, "y": y, "action": 0, "beta": 0.5} for o in range(2) for x, y in layout.open_cells]
    csv_path = write_csv(tmp_path / "option_map.csv", OPTION_MAP_COLUMNS, rows)
    figures = plot_option_maps(csv_path, path, tmp_path / "figs")
    assert [f.name for f in figures] == ["option_0.svg", "option_1.svg"]
    assert all(f.read_text().lstrip().startswith("<?xml") for f in figures)


def test_missing_inputs_are_named(tmp_path, layout_file):
    path, _ = layout_file
    with pytest.raises(VizError) as err:
        plot_option_maps(tmp_path / "absent.csv", path, tmp_path)
    assert err.value.missing == ["option_map"]


def test_usage_histograms(tmp_path):
    columns = ["frames", "decisions"] + [f"choice_hist_{i}" for i in range(6)]
    rows = [{"frames": f, "decisions": 10, **{f"choice_hist_{i}": 1 / 6 for i in range(6)}} for f in (100, 200, 300)]
    out = plot_usage_histograms(write_csv(tmp_path / "usage.csv", columns, rows), tmp_path / "usage.svg")
    assert out.exists()


def test_learning_curves_and_missing_series(tmp_path):
    columns = ["frames", "episode_return_mean"]
    a = write_csv(tmp_path / "a.csv", columns, [{"frames": 10, "episode_return_mean": 0.1},
                                               {"frames": 20, "episode_return_mean": 0.4}])
    out = plot_learning_curves({"modac": [a, a]}, tmp_path / "curve.svg", budget=20)
    assert out.exists()
    with pytest.raises(VizError):
        plot_learning_curves({"flat": [tmp_path / "missing.csv"]}, tmp_path / "x.svg")


def test_trajectory_plot(tmp_path, layout_file):
    path, _ = layout_file
    columns = ["step", "x", "y", "action", "reward", "active_option"]
    rows = [{"step": 0, "x": 1, "y": 3, "action": 1, "reward": 0.0, "active_option": 0},
            {"step": 1, "x": 2, "y": 3, "action": 1, "reward": 0.0, "active_option": -1}]
    out = plot_trajectory(write_csv(tmp_path / "t.csv", columns, rows), path, tmp_path / "t.svg")
    assert out.exists()


def test_render_run_from_record(tmp_path):
    record = train_phase(tiny_config(), tmp_path)
    figures = render_run(record)
    names = {f.name for f in figures}
    assert {"learning_curve.svg", "usage.svg", "trajectory.svg", "option_0.svg", "option_1.svg"} <= names


def test_render_checkpoint_writes_option_maps(tmp_path):
    cfg = tiny_config()
    record = train_phase(cfg, tmp_path / "runs")
    figures = render_checkpoint(record.final_checkpoint, cfg.with_override("experiment.agent", "flat"), tmp_path / "figs")
    assert {f.name for f in figures} == {"option_0.svg", "option_1.svg", "trajectory.svg"}
    with pytest.raises(VizError):
        render_checkpoint(tmp_path / "missing", cfg, tmp_path / "figs")
