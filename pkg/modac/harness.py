# -*- coding: utf-8 -*-
"""
Experiment protocol: train, freeze, transfer and sweep.

Every phase writes into its own run directory::

    <output>/<experiment name>/seed_<seed>/<phase>/
        config.yaml           resolved configuration
        metrics.csv           learning curve (averaged over test tasks at transfer)
        metrics_task<i>.csv   per-test-task curves (transfer only)
        usage_snapshots.csv   choice histograms over training
        checkpoints/          final and periodic parameter checkpoints (train only)
        trajectory.csv        one sampled episode
        option_map.csv        argmax action and termination per option and cell
        layout.txt            the layout the artifacts refer to
        run_record.json       index of the above

Plots are produced from these files by :mod:`modac.viz`.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modac.agent import Actor, AgentParams, HierarchicalAgent, TrajectorySegment, export_trajectory_csv, option_arrow_map
from modac.bootstrap import ConfigError, ExperimentConfig
from modac.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from modac.envs import NUM_ACTIONS, GridLayout, build_env
from modac.orchestrator import Job, SweepOrchestrator
from modac.trainer import LearnerResult, algorithm1_driver, make_learner, usage_columns
from modac.utils import derive_rng, get_logger, standard_error

logger = get_logger("modac.harness")

METRICS_FILE = "metrics.csv"
USAGE_FILE = "usage_snapshots.csv"
TRAJECTORY_FILE = "trajectory.csv"
OPTION_MAP_FILE = "option_map.csv"
LAYOUT_FILE = "layout.txt"
RECORD_FILE = "run_record.json"
SUMMARY_FILE = "sweep_summary.csv"

OPTION_MAP_COLUMNS = ("option", "x", "y", "action", "beta")
PARAM_KEYS = ("manager", "options", "rewards", "terminations")
SWEEP_COLUMNS = ("row", "axis", "value", "seed", "agent", "transfer_auc", "transfer_auc_sem",
                 "transfer_auc_with_training", "final_return", "option_selection_frac", "mean_option_len",
                 "auc_diff_vs_reference", "auc_diff_sem")


class RunRecordError(RuntimeError):
    """A run record points at missing or unreadable artifacts."""


# --- csv ------------------------------------------------------------------------

def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c, "")) for c in columns])
    return path


def read_csv(path: str | Path) -> Tuple[List[str], List[Dict[str, str]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def read_metrics(path: str | Path) -> List[Dict[str, float]]:
    """Metrics rows as floats; the ``baseline`` label column is dropped."""
    _, rows = read_csv(path)
    return [{k: float(v) for k, v in row.items() if k != "baseline"} for row in rows]


def write_metrics(path: str | Path, result: LearnerResult, kind: str) -> Path:
    columns = list(result.columns)
    rows = [dict(r) for r in result.rows]
    if kind != "modac":
        columns.append("baseline")
        for row in rows:
            row["baseline"] = kind
    return write_csv(path, columns, rows)


def comparable_text(path: str | Path) -> str:
    """The metrics CSV re-serialised without the ``baseline`` column."""
    columns, rows = read_csv(path)
    kept = [c for c in columns if c != "baseline"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(kept)
    for row in rows:
        writer.writerow([row[c] for c in kept])
    return buf.getvalue()


def metrics_equal(path_a: str | Path, path_b: str | Path) -> bool:
    return comparable_text(path_a) == comparable_text(path_b)


# --- curve summaries ----------------------------------------------------------------

def _curve(rows: Sequence[Dict[str, float]], key: str) -> Tuple[np.ndarray, np.ndarray]:
    x = np.array([r["frames"] for r in rows], dtype=np.float64)
    y = np.array([r[key] for r in rows], dtype=np.float64)
    keep = np.isfinite(y)
    return x[keep], y[keep]


def _integral(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


def area_under_curve(rows: Sequence[Dict[str, float]], key: str = "episode_return_mean") -> float:
    """Trapezoidal area under the curve divided by its frame span (an average return)."""
    x, y = _curve(rows, key)
    if x.size == 0:
        return float("nan")
    if x.size == 1 or x[-1] == x[0]:
        return float(y[0])
    return _integral(x, y) / float(x[-1] - x[0])


def transfer_auc_with_training(rows: Sequence[Dict[str, float]], train_frames: int,
                               key: str = "episode_return_mean") -> float:
    """Average return over the training and transfer frames together.

    Training frames produce no return on the held-out tasks, so they only
    widen the span the transfer area is spread over.
    """
    x, y = _curve(rows, key)
    if x.size == 0:
        return float("nan")
    area = _integral(x, y) if x.size > 1 else float(y[0]) * float(x[0])
    span = float(x[-1] - x[0]) if x.size > 1 else float(x[0])
    total = span + float(train_frames)
    return area / total if total > 0 else float("nan")


def average_curves(curves: Sequence[Sequence[Dict[str, float]]], columns: Sequence[str]) -> List[Dict[str, float]]:
    """Per-index mean over curves of equal cadence; the sem column is the spread of the task means."""
    if not curves:
        return []
    length = min(len(c) for c in curves)
    out = []
    for j in range(length):
        row: Dict[str, float] = {"frames": curves[0][j]["frames"]}
        for col in columns:
            if col in ("frames", "episode_return_sem"):
                continue
            values = np.array([c[j][col] for c in curves], dtype=np.float64)
            finite = values[np.isfinite(values)]
            row[col] = float(finite.mean()) if finite.size else float("nan")
        row["episode_return_sem"] = standard_error(c[j]["episode_return_mean"] for c in curves)
        out.append(row)
    return out


def option_selection_fraction(rows: Sequence[Dict[str, float]], num_options: int) -> float:
    """Mean share of manager decisions that picked an option."""
    shares = [sum(r[f"choice_hist_{i}"] for i in range(num_options)) for r in rows
              if sum(r.get(f"choice_hist_{i}", 0.0) for i in range(num_options + NUM_ACTIONS)) > 0]
    return float(np.mean(shares)) if shares else 0.0


# --- run records --------------------------------------------------------------------

@dataclass
class RunRecord:
    phase: str
    kind: str
    run_dir: str
    config_hash: str
    seed: int
    frames: int
    metrics: Dict[str, str] = field(default_factory=dict)
    usage: Optional[str] = None
    checkpoints: List[str] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_clock: Dict[str, float] = field(default_factory=dict)
    summary: Dict[str, float] = field(default_factory=dict)

    @property
    def final_checkpoint(self) -> Optional[str]:
        return self.checkpoints[-1] if self.checkpoints else None

    def save(self) -> Path:
        path = Path(self.run_dir) / RECORD_FILE
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise RunRecordError(f"no run record at {path}") from exc
        return cls(**data)

    def verify(self) -> None:
        """Every claimed file exists and parses."""
        problems = []
        for name, path in {**self.metrics, **({"usage": self.usage} if self.usage else {})}.items():
            try:
                columns, _ = read_csv(path)
                if "frames" not in columns:
                    problems.append(f"{name}: no frames column in {path}")
            except (OSError, csv.Error) as exc:
                problems.append(f"{name}: {exc}")
        for path in self.checkpoints:
            try:
                load_checkpoint(path)
            except CheckpointError as exc:
                problems.append(f"checkpoint {path}: {exc}")
        for name, path in self.artifacts.items():
            if not Path(path).exists():
                problems.append(f"{name}: missing {path}")
        if problems:
            raise RunRecordError("; ".join(problems))


def run_directory(config: ExperimentConfig, seed: int, phase: str, output: str | Path | None = None) -> Path:
    root = Path(output) if output is not None else Path(config.experiment.output_dir)
    return root / config.experiment.name / f"seed_{seed}" / phase


# --- checkpoints ------------------------------------------------------------------

def save_params(directory: str | Path, params: AgentParams, metadata: Dict[str, Any]) -> Path:
    sets = {key: getattr(params, key) for key in PARAM_KEYS if getattr(params, key) is not None}
    return save_checkpoint(directory, sets, metadata).parent


def load_trained(checkpoint: str | Path) -> Tuple[AgentParams, Dict[str, Any]]:
    sets, metadata = load_checkpoint(checkpoint)
    if "manager" not in sets:
        raise CheckpointError(f"{checkpoint}: no manager parameters")
    return AgentParams(**{key: sets.get(key) for key in PARAM_KEYS}), metadata


def frozen_digests(params: AgentParams) -> Dict[str, str]:
    return {key: getattr(params, key).digest() for key in ("options", "terminations")
            if getattr(params, key) is not None}


# --- artifacts ------------------------------------------------------------------------

def first_episode(segment: TrajectorySegment) -> TrajectorySegment:
    ends = np.nonzero(segment.dones)[0]
    if ends.size == 0:
        return segment
    stop = int(ends[0]) + 1
    arrays = {name: getattr(segment, name)[:stop] for name in
              ("obs", "next_obs", "actions", "rewards", "option_rewards", "betas", "terminations", "choices",
               "task_ids", "switches", "dones", "cells")}
    return replace(segment, **arrays, completed_returns=segment.completed_returns[:1])


def write_artifacts(run_dir: Path, config: ExperimentConfig, params: AgentParams, seed: int,
                    phase: str) -> Dict[str, str]:
    """Samples one episode and tabulates the options on the layout it ran in."""
    env = build_env(asdict(config.env), "train" if phase == "train" else "test")
    actor = Actor(env, derive_rng(seed, phase, "trajectory"), task_index=0)
    layout: GridLayout = env.layout
    k = params.options.spec.head("policy").groups if params.options is not None else 0
    kind = config.experiment.agent
    termination = "fixed" if kind == "mlsh" or (k and params.terminations is None) else "learned"
    agent = HierarchicalAgent(k, NUM_ACTIONS, termination, config.agent.mlsh_duration)
    segment = first_episode(agent.act(params.snapshot(), [actor], env.max_steps)[0])

    out = {"trajectory": str(export_trajectory_csv(segment, run_dir / TRAJECTORY_FILE))}
    (run_dir / LAYOUT_FILE).write_text(layout.to_text() + "\n", encoding="utf-8")
    out["layout"] = str(run_dir / LAYOUT_FILE)
    if params.options is not None:
        arrows = option_arrow_map(params.options, params.terminations, layout, env.obs_grid)
        rows = [{"option": o, "x": x, "y": y, "action": a, "beta": b}
                for o, cells in arrows.items() for x, y, a, b in cells]
        out["option_map"] = str(write_csv(run_dir / OPTION_MAP_FILE, OPTION_MAP_COLUMNS, rows))
    return out


# --- phases -----------------------------------------------------------------------------

def _metadata(config: ExperimentConfig, seed: int, frames: int, num_options: int, phase: str) -> Dict[str, Any]:
    return {"kind": config.experiment.agent, "num_options": num_options, "frames": frames, "seed": seed,
            "config_hash": config.hash, "phase": phase}


def train_phase(config: ExperimentConfig, output: str | Path | None = None, seed: Optional[int] = None) -> RunRecord:
    """Trains the configured agent with the switching cost active and checkpoints everything it learned."""
    seed = config.experiment.seed if seed is None else int(seed)
    kind = config.experiment.agent
    num_options = 0 if kind == "flat" else config.agent.num_options
    run_dir = run_directory(config, seed, "train", output)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    logger.info("train phase: %s seed %d -> %s", kind, seed, run_dir)

    checkpoints: List[str] = []

    def hook(frames: int, params: AgentParams) -> None:
        path = save_params(run_dir / "checkpoints" / f"frames_{frames:010d}", params,
                           _metadata(config, seed, frames, num_options, "train"))
        checkpoints.append(str(path))

    started = time.perf_counter()
    if kind == "modac":
        result = algorithm1_driver(config, checkpoint_hook=hook, seed=seed)
    else:
        result = make_learner(config, "train", seed=seed, checkpoint_hook=hook).run()
    elapsed = time.perf_counter() - started

    metrics = write_metrics(run_dir / METRICS_FILE, result, kind)
    usage = write_csv(run_dir / USAGE_FILE, usage_columns(num_options + NUM_ACTIONS), result.usage)
    final = save_params(run_dir / "checkpoints" / "final", result.params,
                        _metadata(config, seed, result.frames, num_options, "train"))
    checkpoints.append(str(final))
    artifacts = write_artifacts(run_dir, config, result.params, seed, "train")

    last = result.rows[-1] if result.rows else {}
    record = RunRecord(
        phase="train", kind=kind, run_dir=str(run_dir), config_hash=config.hash, seed=seed, frames=result.frames,
        metrics={"train": str(metrics)}, usage=str(usage), checkpoints=checkpoints, artifacts=artifacts,
        wall_clock={"total_s": elapsed, "learner_s": result.wall_clock},
        summary={"final_return": float(last.get("episode_return_mean", float("nan"))),
                 "mean_option_len": float(last.get("mean_option_len", 0.0)),
                 "option_frac": float(last.get("option_frac", 0.0)),
                 "meta_updates": result.meta_updates, "meta_skips": result.meta_skips},
    )
    record.save()
    return record


def transfer_phase(config: ExperimentConfig, checkpoint: str | Path | None = None, output: str | Path | None = None,
                   seed: Optional[int] = None) -> RunRecord:
    """Fresh managers on every test task over frozen options; no switching cost.

    Each test task is learned separately with its own newly initialised
    manager, and the reported curve is the per-index mean over tasks.
    """
    seed = config.experiment.seed if seed is None else int(seed)
    kind = config.experiment.agent
    frozen: Optional[AgentParams] = None
    train_frames = 0
    num_options = 0
    if checkpoint is not None:
        trained, metadata = load_trained(checkpoint)
        train_frames = int(metadata.get("frames", 0))
        if kind != "flat":
            if metadata.get("kind") != kind or metadata.get("num_options") != config.agent.num_options:
                raise CheckpointError(
                    f"checkpoint holds a {metadata.get('kind')} agent with K={metadata.get('num_options')}, "
                    f"config asks for {kind} with K={config.agent.num_options}")
            if config.agent.num_options > 0:
                if trained.options is None:
                    raise CheckpointError(f"{checkpoint}: no option parameters to transfer")
                frozen = AgentParams(trained.manager, trained.options, None, trained.terminations)
                num_options = config.agent.num_options
    elif kind != "flat":
        raise CheckpointError(f"transfer of a {kind} agent needs a trained checkpoint")
    before = frozen_digests(frozen) if frozen is not None else {}

    run_dir = run_directory(config, seed, "transfer", output)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    num_tasks = build_env(asdict(config.env), "test").num_tasks
    logger.info("transfer phase: %s seed %d over %d test tasks -> %s", kind, seed, num_tasks, run_dir)

    started = time.perf_counter()
    metrics: Dict[str, str] = {}
    curves, usage_rows = [], []
    columns: List[str] = []
    frames = 0
    last_params: Optional[AgentParams] = None
    for task in range(num_tasks):
        learner = make_learner(config, "transfer", seed=seed, task_index=task, frozen=frozen)
        result = learner.run()
        if frozen is not None and frozen_digests(learner.params) != before:
            raise RuntimeError(f"frozen option parameters changed while transferring to test task {task}")
        metrics[f"task{task}"] = str(write_metrics(run_dir / f"metrics_task{task}.csv", result, kind))
        curves.append(result.rows)
        usage_rows.extend({"task": task, **row} for row in result.usage)
        columns = list(result.columns)
        frames += result.frames
        last_params = learner.params
        num_options = learner.num_options
    elapsed = time.perf_counter() - started

    averaged = average_curves(curves, columns)
    if kind != "modac":
        columns = columns + ["baseline"]
        averaged = [{**row, "baseline": kind} for row in averaged]
    metrics["average"] = str(write_csv(run_dir / METRICS_FILE, columns, averaged))
    usage = write_csv(run_dir / USAGE_FILE, ["task"] + usage_columns(num_options + NUM_ACTIONS), usage_rows)
    if frozen is not None and frozen_digests(frozen) != before:
        raise RuntimeError("frozen option parameters changed during transfer")
    artifacts = write_artifacts(run_dir, config, last_params, seed, "transfer") if last_params is not None else {}

    record = RunRecord(
        phase="transfer", kind=kind, run_dir=str(run_dir), config_hash=config.hash, seed=seed, frames=frames,
        metrics=metrics, usage=str(usage), checkpoints=[str(checkpoint)] if checkpoint is not None else [],
        artifacts=artifacts, wall_clock={"total_s": elapsed},
        summary={"transfer_auc": area_under_curve(averaged),
                 "transfer_auc_with_training": transfer_auc_with_training(averaged, train_frames),
                 "final_return": float(averaged[-1]["episode_return_mean"]) if averaged else float("nan"),
                 "option_selection_frac": option_selection_fraction(averaged, num_options),
                 "mean_option_len": float(np.mean([r["mean_option_len"] for r in averaged])) if averaged else 0.0,
                 "train_frames": train_frames, "num_tasks": num_tasks},
    )
    record.save()
    return record


def pipeline_job(config_data: Dict[str, Any], seed: int, output: str, value: Any = None) -> Dict[str, Any]:
    """Train then transfer one configuration; the flat agent only has a transfer phase."""
    config = ExperimentConfig.from_dict(config_data)
    checkpoint, train_dir = None, ""
    if config.experiment.agent != "flat":
        train = train_phase(config, output, seed)
        checkpoint, train_dir = train.final_checkpoint, train.run_dir
    transfer = transfer_phase(config, checkpoint, output, seed)
    return {"value": value, "seed": seed, "agent": config.experiment.agent, "train_dir": train_dir,
            "transfer_dir": transfer.run_dir, **transfer.summary}


def _value_label(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def sweep(config: ExperimentConfig, axis: str, values: Sequence[Any], seeds: Optional[Sequence[int]] = None,
          output: str | Path | None = None, reference: Any = None, backend: str = "serial",
          max_workers: int = 4) -> List[Dict[str, Any]]:
    """One train and transfer pipeline per (value, seed); writes ``sweep_summary.csv``.

    Rows are the individual runs followed by one aggregate row per value with
    the mean transfer AUC, its standard error and, when ``reference`` names one
    of the values, the paired AUC difference against it.
    """
    if not values:
        raise ConfigError("a sweep needs at least one value")
    if reference is not None and reference not in values:
        raise ConfigError(f"reference value {reference!r} is not among the swept values")
    seeds = list(seeds) if seeds else list(config.experiment.seeds)
    root = Path(output) if output is not None else Path(config.experiment.output_dir)
    sweep_dir = root / f"{config.experiment.name}__sweep_{axis.replace('.', '-')}"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for value in values:
        cfg = config.with_override(axis, value)
        cfg = cfg.with_override("experiment.name", f"{config.experiment.name}__{axis}={_value_label(value)}")
        for seed in seeds:
            jobs.append(Job(f"{axis}={_value_label(value)}/seed{seed}", pipeline_job,
                            {"config_data": cfg.to_dict(), "seed": seed, "output": str(sweep_dir), "value": value}))
    logger.info("sweep over %s: %d values x %d seeds", axis, len(values), len(seeds))
    results = SweepOrchestrator(backend, str(sweep_dir / "sweep_report.json"), max_workers).run(jobs)

    rows: List[Dict[str, Any]] = []
    for res in results:
        rows.append({"row": "run", "axis": axis, **res, "value": _value_label(res["value"]),
                     "transfer_auc_sem": float("nan"), "auc_diff_vs_reference": float("nan"),
                     "auc_diff_sem": float("nan")})

    def aucs(value: Any) -> Dict[int, float]:
        return {r["seed"]: r["transfer_auc"] for r in results if r["value"] == value}

    for value in values:
        per_seed = aucs(value)
        agg: Dict[str, Any] = {"row": "aggregate", "axis": axis, "value": _value_label(value), "seed": "",
                               "agent": value if axis == "experiment.agent" else config.experiment.agent,
                               "transfer_auc": float(np.mean(list(per_seed.values()))),
                               "transfer_auc_sem": standard_error(per_seed.values())}
        for col in ("transfer_auc_with_training", "final_return", "option_selection_frac", "mean_option_len"):
            agg[col] = float(np.nanmean([r[col] for r in results if r["value"] == value]))
        if reference is not None:
            ref = aucs(reference)
            diffs = [per_seed[s] - ref[s] for s in per_seed if s in ref]
            agg["auc_diff_vs_reference"] = float(np.mean(diffs)) if diffs else float("nan")
            agg["auc_diff_sem"] = standard_error(diffs)
        else:
            agg["auc_diff_vs_reference"] = agg["auc_diff_sem"] = float("nan")
        rows.append(agg)

    write_csv(sweep_dir / SUMMARY_FILE, SWEEP_COLUMNS, rows)
    return rows
