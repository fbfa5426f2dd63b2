# -*- coding: utf-8 -*-
"""
MODAC - Main Entry Point.

Subcommands: train, transfer, sweep, viz, selftest.
"""
import argparse
import sys
from typing import Any, Dict, List

import yaml
from rich.console import Console
from rich.table import Table

from modac.autodiff import NonFiniteError
from modac.bootstrap import ConfigError, ExperimentConfig, load_config, load_experiment, parse_override
from modac.checkpoint import CheckpointError
from modac.harness import RunRecord, sweep, train_phase, transfer_phase
from modac.nets import OptimizerError
from modac.utils import get_logger, set_log_level

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

logger = get_logger("modac.main")


def display_banner(console: Console):
    console.print("[bold cyan]MODAC[/bold cyan] [dim]meta-gradient option discovery[/dim]")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = dict(parse_override(item) for item in args.set or [])
    return load_experiment(args.config, overrides)


def print_summary(console: Console, record: RunRecord):
    table = Table(title=f"{record.phase} phase ({record.kind}, seed {record.seed})")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green", justify="right")
    table.add_row("frames", str(record.frames))
    for key, value in record.summary.items():
        table.add_row(key, f"{value:.4g}" if isinstance(value, float) else str(value))
    table.add_row("run directory", record.run_dir)
    console.print(table)


def cmd_train(args: argparse.Namespace, console: Console) -> int:
    config = resolve_config(args)
    record = train_phase(config, args.output, args.seed)
    print_summary(console, record)
    if args.transfer:
        print_summary(console, transfer_phase(config, record.final_checkpoint, args.output, args.seed))
    return EXIT_OK


def cmd_transfer(args: argparse.Namespace, console: Console) -> int:
    config = resolve_config(args)
    print_summary(console, transfer_phase(config, args.checkpoint, args.output, args.seed))
    return EXIT_OK


def sweep_values(args: argparse.Namespace) -> List[Any]:
    if args.values is not None:
        values = yaml.safe_load(args.values)
        return values if isinstance(values, list) else [values]
    presets = load_config("sweeps")
    if args.axis not in presets:
        raise ConfigError(f"no --values given and configs/sweeps.yaml has no preset for '{args.axis}'")
    return list(presets[args.axis])


def cmd_sweep(args: argparse.Namespace, console: Console) -> int:
    config = resolve_config(args)
    seeds = [int(s) for s in yaml.safe_load(args.seeds)] if args.seeds else None
    reference = yaml.safe_load(args.reference) if args.reference is not None else None
    rows = sweep(config, args.axis, sweep_values(args), seeds, args.output, reference, args.backend, args.workers)
    table = Table(title=f"Sweep over {args.axis}")
    for col in ("value", "agent", "transfer_auc", "transfer_auc_sem", "final_return", "option_selection_frac",
                "auc_diff_vs_reference"):
        table.add_column(col, style="cyan" if col == "value" else None)
    for row in rows:
        if row["row"] == "aggregate":
            table.add_row(*[f"{row[c]:.4g}" if isinstance(row[c], float) else str(row[c]) for c in
                            ("value", "agent", "transfer_auc", "transfer_auc_sem", "final_return",
                             "option_selection_frac", "auc_diff_vs_reference")])
    console.print(table)
    return EXIT_OK


def cmd_viz(args: argparse.Namespace, console: Console) -> int:
    from modac.viz import plot_learning_curves, render_checkpoint, render_run

    if not args.run and not args.checkpoint:
        raise ConfigError("viz needs at least one --run or --checkpoint")
    for checkpoint in args.checkpoint or []:
        out = args.output or f"{checkpoint}/figures"
        for figure in render_checkpoint(checkpoint, resolve_config(args), out):
            console.print(f"[green][*] {figure}[/green]")
    records = [RunRecord.load(path) for path in args.run or []]
    for record in records:
        for figure in render_run(record, args.output if len(records) == 1 else None):
            console.print(f"[green][*] {figure}[/green]")
    if len(records) > 1 and args.output:
        series: Dict[str, List[str]] = {}
        for record in records:
            series.setdefault(record.kind, []).append(record.metrics.get("average", next(iter(record.metrics.values()))))
        figure = plot_learning_curves(series, f"{args.output}/comparison.svg")
        console.print(f"[green][*] {figure}[/green]")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace, console: Console) -> int:
    from modac.selftest import run_selftest

    return EXIT_OK if run_selftest(console, quick=args.quick) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="MODAC - meta-gradient discovery of options")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", help="Config name under configs/ or a YAML/JSON path (default: default).")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override one config value.")
        p.add_argument("--seed", type=int, help="Run seed (default: experiment.seed).")
        p.add_argument("-o", "--output", help="Output root (default: experiment.output_dir).")
        p.add_argument("--debug", action="store_true", help="Enable debug logging.")

    p = sub.add_parser("train", help="Train an agent on the training tasks.")
    shared(p)
    p.add_argument("--transfer", action="store_true", help="Run the transfer phase on the final checkpoint afterwards.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="Freeze trained options and learn fresh managers on the test tasks.")
    shared(p)
    p.add_argument("--checkpoint", help="Checkpoint directory from a train run (not needed for the flat agent).")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sweep", help="Train and transfer over a grid of values and seeds.")
    shared(p)
    p.add_argument("--axis", required=True, help="Dotted config key, e.g. agent.switching_cost.")
    p.add_argument("--values", help="YAML list of values (default: preset from configs/sweeps.yaml).")
    p.add_argument("--seeds", help="YAML list of seeds (default: experiment.seeds).")
    p.add_argument("--reference", help="Value the paired AUC difference is taken against.")
    p.add_argument("--backend", choices=("serial", "thread", "ray"), default="serial")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("viz", help="Render SVG figures from run directories.")
    p.add_argument("--run", action="append", help="Run directory or run_record.json (repeatable).")
    p.add_argument("--checkpoint", action="append", help="Checkpoint directory to draw option maps from (repeatable).")
    p.add_argument("-c", "--config", help="Config for --checkpoint rendering (default: default).")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override one config value.")
    p.add_argument("-o", "--output", help="Figure directory.")
    p.add_argument("--debug", action="store_true", help="Enable debug logging.")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("selftest", help="Gradient, return-oracle and equivalence checks.")
    p.add_argument("--quick", action="store_true", help="Fewer oracle trials and only L=1 meta checks.")
    p.add_argument("--debug", action="store_true", help="Enable debug logging.")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.debug:
        set_log_level("DEBUG")
    console = Console()
    display_banner(console)
    logger.info("command: %s", args.command)
    try:
        return args.func(args, console)
    except ConfigError as e:
        logger.error("%s failed: configuration error: %s", args.command, e)
        console.print(f"[bold red][!] Configuration error:[/bold red] {e}")
        return EXIT_CONFIG
    except (NonFiniteError, OptimizerError, FloatingPointError) as e:
        logger.error("%s failed: numeric failure: %s", args.command, e)
        console.print(f"[bold red][!] Numeric failure:[/bold red] {e}")
        return EXIT_NUMERIC
    except (CheckpointError, RuntimeError, FileNotFoundError) as e:
        logger.error("%s failed: %s", args.command, e)
        console.print(f"[bold red][!] {e}[/bold red]")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
