# -*- coding: utf-8 -*-
"""
SVG figures drawn from the CSV artifacts of a run.

Nothing here reads parameters directly: every plotted number comes from a
file written by :mod:`modac.harness`, so a figure can always be rebuilt from
its CSV.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

from modac.bootstrap import ExperimentConfig  # noqa: E402
from modac.checkpoint import MANIFEST_NAME  # noqa: E402
from modac.envs import ACTION_NAMES, MOVES, NUM_ACTIONS, GridLayout  # noqa: E402
from modac.harness import (LAYOUT_FILE, OPTION_MAP_FILE, TRAJECTORY_FILE, RunRecord, load_trained, read_csv,  # noqa: E402
                           read_metrics, write_artifacts)
from modac.utils import get_logger  # noqa: E402

logger = get_logger("modac.viz")

OPTION_COLOR = "tab:blue"
PRIMITIVE_COLOR = "tab:red"


class VizError(RuntimeError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__("missing data for: " + ", ".join(self.missing))


def _require(paths: Mapping[str, Optional[str | Path]]) -> None:
    missing = [name for name, path in paths.items() if path is None or not Path(path).exists()]
    if missing:
        raise VizError(missing)


def load_layout(path: str | Path) -> GridLayout:
    return GridLayout.from_text(Path(path).read_text(encoding="utf-8"), Path(path).stem)


def _draw_walls(ax: plt.Axes, layout: GridLayout) -> None:
    walls = np.ma.masked_where(~layout.walls, np.ones(layout.walls.shape))
    ax.imshow(walls, cmap="Greys", vmin=0, vmax=1.5, interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])


def plot_option_maps(option_map_csv: str | Path, layout_path: str | Path, out_dir: str | Path) -> List[Path]:
    """One arrow map per option: argmax action per open cell over a termination heat map."""
    _require({"option_map": option_map_csv, "layout": layout_path})
    layout = load_layout(layout_path)
    _, rows = read_csv(option_map_csv)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_option: Dict[int, List[Dict[str, str]]] = {}
    for row in rows:
        by_option.setdefault(int(row["option"]), []).append(row)

    paths = []
    for option, cells in sorted(by_option.items()):
        heat = np.full(layout.walls.shape, np.nan)
        xs, ys, us, vs = [], [], [], []
        for row in cells:
            x, y, action = int(row["x"]), int(row["y"]), int(row["action"])
            heat[y, x] = float(row["beta"])
            dx, dy = MOVES[action]
            xs.append(x)
            ys.append(y)
            us.append(dx * 0.8)
            vs.append(dy * 0.8)
        fig, ax = plt.subplots(figsize=(4, 4))
        if np.any(np.isfinite(heat)):
            im = ax.imshow(heat, cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="termination")
        _draw_walls(ax, layout)
        ax.quiver(xs, ys, us, vs, angles="xy", scale_units="xy", scale=1, pivot="middle", color="white",
                  width=0.012)
        ax.set_title(f"option {option}")
        path = out_dir / f"option_{option}.svg"
        fig.savefig(path, format="svg", bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def plot_usage_histograms(usage_csv: str | Path, out: str | Path, num_options: Optional[int] = None,
                          max_panels: int = 3) -> Path:
    """Choice histograms at evenly spaced snapshots: option bars then primitive-action bars."""
    _require({"usage": usage_csv})
    columns, rows = read_csv(usage_csv)
    hist_cols = [c for c in columns if c.startswith("choice_hist_")]
    if not rows or not hist_cols:
        raise VizError(["usage snapshots"])
    k = len(hist_cols) - NUM_ACTIONS if num_options is None else num_options
    picks = sorted(set(np.linspace(0, len(rows) - 1, min(max_panels, len(rows))).round().astype(int)))
    labels = [f"o{i}" for i in range(k)] + list(ACTION_NAMES)
    colors = [OPTION_COLOR] * k + [PRIMITIVE_COLOR] * NUM_ACTIONS

    fig, axes = plt.subplots(1, len(picks), figsize=(3.5 * len(picks), 3), squeeze=False)
    for ax, idx in zip(axes[0], picks):
        row = rows[idx]
        ax.bar(range(len(hist_cols)), [float(row[c]) for c in hist_cols], color=colors)
        ax.set_xticks(range(len(hist_cols)))
        ax.set_xticklabels(labels)
        ax.set_ylim(0, 1)
        ax.set_title(f"{int(float(row['frames']))} frames")
    axes[0][0].set_ylabel("fraction of decisions")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def plot_learning_curves(series: Mapping[str, Sequence[str | Path]], out: str | Path,
                         budget: Optional[int] = None, key: str = "episode_return_mean") -> Path:
    """Mean over seeds with the min-max range shaded, one line per label."""
    missing = [f"{label}:{p}" for label, paths in series.items() for p in paths if not Path(p).exists()]
    missing += [label for label, paths in series.items() if not paths]
    if missing or not series:
        raise VizError(missing or ["learning curves"])

    fig, ax = plt.subplots(figsize=(6, 4))
    right = 0.0
    for label, paths in series.items():
        curves = [read_metrics(p) for p in paths]
        length = min(len(c) for c in curves)
        frames = np.array([curves[0][j]["frames"] for j in range(length)])
        values = np.array([[c[j][key] for j in range(length)] for c in curves])
        with np.errstate(all="ignore"):
            mean = np.nanmean(values, axis=0) if values.size else values
        ax.plot(frames, mean, label=label)
        ax.fill_between(frames, np.nanmin(values, axis=0), np.nanmax(values, axis=0), alpha=0.25)
        right = max(right, float(frames[-1]) if length else 0.0)
    ax.set_xlim(0, budget if budget is not None else right)
    ax.set_xlabel("frames")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend(loc="lower right")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def plot_trajectory(trajectory_csv: str | Path, layout_path: str | Path, out: str | Path) -> Path:
    """Path of one episode, primitive steps in grey and each option in its own colour."""
    _require({"trajectory": trajectory_csv, "layout": layout_path})
    layout = load_layout(layout_path)
    _, rows = read_csv(trajectory_csv)
    if not rows:
        raise VizError(["trajectory steps"])
    cells = [(int(r["x"]), int(r["y"])) for r in rows]
    moves = [MOVES[int(r["action"])] for r in rows]
    active = [int(r["active_option"]) for r in rows]
    palette = plt.get_cmap("tab10")

    fig, ax = plt.subplots(figsize=(4, 4))
    _draw_walls(ax, layout)
    for (x, y), (dx, dy), o in zip(cells, moves, active):
        tx, ty = (x + dx, y + dy) if layout.is_open((x + dx, y + dy)) else (x, y)
        color = "0.5" if o < 0 else palette(o % 10)
        ax.plot([x, tx], [y, ty], color=color, linewidth=2.5, solid_capstyle="round")
    end = cells[-1]
    dx, dy = moves[-1]
    if layout.is_open((end[0] + dx, end[1] + dy)):
        end = (end[0] + dx, end[1] + dy)
    ax.plot(*cells[0], marker="o", color="green", markersize=9)
    ax.plot(*end, marker="X", color="red", markersize=9)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def render_run(record: RunRecord, out_dir: Optional[str | Path] = None) -> List[Path]:
    """All figures for one run directory."""
    run_dir = Path(record.run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "figures"
    config_path = run_dir / "config.yaml"
    _require({"config": config_path})
    config = ExperimentConfig.from_dict(yaml.safe_load(config_path.read_text(encoding="utf-8")))
    budget = config.budget.train_frames if record.phase == "train" else config.budget.transfer_frames

    figures: List[Path] = []
    curves = {name: [path] for name, path in record.metrics.items()}
    figures.append(plot_learning_curves(curves, out_dir / "learning_curve.svg", budget))
    if record.usage:
        figures.append(plot_usage_histograms(record.usage, out_dir / "usage.svg"))
    layout = record.artifacts.get("layout", str(run_dir / LAYOUT_FILE))
    option_map = record.artifacts.get("option_map")
    if option_map is not None:
        figures.extend(plot_option_maps(option_map, layout, out_dir))
    elif (run_dir / OPTION_MAP_FILE).exists():
        figures.extend(plot_option_maps(run_dir / OPTION_MAP_FILE, layout, out_dir))
    trajectory = record.artifacts.get("trajectory", str(run_dir / TRAJECTORY_FILE))
    figures.append(plot_trajectory(trajectory, layout, out_dir / "trajectory.svg"))
    logger.info("wrote %d figures to %s", len(figures), out_dir)
    return figures


def render_checkpoint(checkpoint: str | Path, config: ExperimentConfig, out_dir: str | Path) -> List[Path]:
    """Option maps and a sampled trajectory for a checkpoint, via freshly written CSVs."""
    _require({"checkpoint": Path(checkpoint) / MANIFEST_NAME})
    params, metadata = load_trained(checkpoint)
    kind = metadata.get("kind", config.experiment.agent)
    if kind != config.experiment.agent:
        config = config.with_override("experiment.agent", kind)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = write_artifacts(out_dir, config, params, int(metadata.get("seed", config.experiment.seed)), "train")
    figures: List[Path] = []
    if "option_map" in artifacts:
        figures.extend(plot_option_maps(artifacts["option_map"], artifacts["layout"], out_dir))
    figures.append(plot_trajectory(artifacts["trajectory"], artifacts["layout"], out_dir / "trajectory.svg"))
    logger.info("wrote %d figures for %s to %s", len(figures), checkpoint, out_dir)
    return figures
