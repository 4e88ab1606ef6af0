#!/usr/bin/env python3
"""
ICL Geometry Lab

Trains a small decoder-only transformer on synthetic in-context-learning tasks
and measures how task information is compressed and then expressed across its
layers. Every subcommand writes a run directory with CSV/SVG artifacts and a
manifest.json; see README.md.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from lab.core.config import get_settings
from lab.core.exceptions import ConfigError, handle_cli_errors
from lab.core.logging import setup_logging
from lab.io.plots import PLOT_STYLES, plot_curves
from lab.models.config import ExperimentConfig

logger = logging.getLogger("icl_lab")

# subcommand -> experiment kind
EXPERIMENT_COMMANDS = {
    "train": "train",
    "tdnv": "tdnv",
    "grid-tdnv": "grid_tdnv",
    "probes": "probes",
    "bias-variance": "bias_variance",
    "theorem": "theorem",
    "contrastive-compare": "contrastive_compare",
}

SWEEP_KINDS = {
    "noise": "noise_sweep",
    "position": "position_sweep",
    "k": "k_sweep",
    "size": "size_sweep",
    "repeat-distinct": "repeat_distinct",
}

# subcommand -> plumbing command
PLUMBING_COMMANDS = {"gen-data": "gen_data", "trace": "trace", "ingest": "ingest"}


def load_config(args: argparse.Namespace, kind: Optional[str]) -> ExperimentConfig:
    """Config file (if any) plus command-line overrides"""
    overrides: Dict[str, Any] = {"seed": args.seed, "output_dir": args.out, "checkpoint": args.checkpoint}
    overrides["kind"] = kind
    # plumbing commands do not care which experiment kind the config names
    if args.config:
        return ExperimentConfig.from_file(args.config, default_kind="tdnv", **overrides)
    data = {k: v for k, v in overrides.items() if v is not None}
    data.setdefault("kind", "tdnv")
    return ExperimentConfig.model_validate(data)


def add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Experiment config file (JSON)")
    parser.add_argument("--seed", type=int, help="Override the config seed")
    parser.add_argument("--out", help="Output directory (default: $ICL_LAB_OUTPUT_ROOT/<command>)")
    parser.add_argument("--checkpoint", help="Trained model to load instead of training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ICL geometry lab: layerwise compression and expression of tasks")
    parser.add_argument("--log-level", help="Override ICL_LAB_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-data", "trace"):
        add_run_options(sub.add_parser(name, help=f"Run the {name} command"))
    for name, kind in EXPERIMENT_COMMANDS.items():
        add_run_options(sub.add_parser(name, help=f"Run the {kind} experiment"))

    sweep = sub.add_parser("sweep", help="Run one of the sweep experiments")
    sweep.add_argument("--kind", required=True, choices=sorted(SWEEP_KINDS), help="Which sweep")
    add_run_options(sweep)

    ingest = sub.add_parser("ingest", help="Measure TDNV on an external representation dump")
    ingest.add_argument("--container", required=True, help="ICLT container with hidden states")
    ingest.add_argument("--layout", required=True, help="JSON layout manifest for the container")
    add_run_options(ingest)

    plot = sub.add_parser("plot", help="Render CSV files into an SVG")
    plot.add_argument("csv", nargs="+", help="CSV files to draw")
    plot.add_argument("--style", default="layers", choices=PLOT_STYLES, help="Plot style")
    plot.add_argument("--output", required=True, help="SVG file to write")
    plot.add_argument("--title", help="Figure title")
    return parser


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    from lab.experiments.runner import run_experiment

    if args.command == "plot":
        plot_curves(args.csv, style=args.style, out_path=args.output, title=args.title)
        return {"output": args.output}

    params: Dict[str, Any] = {}
    command: Optional[str] = None
    if args.command == "sweep":
        kind = SWEEP_KINDS[args.kind]
    elif args.command in EXPERIMENT_COMMANDS:
        kind = EXPERIMENT_COMMANDS[args.command]
    elif args.command in PLUMBING_COMMANDS:
        kind, command = None, PLUMBING_COMMANDS[args.command]
        if command == "ingest":
            params = {"container": args.container, "layout": args.layout}
    else:
        raise ConfigError(f"unknown command {args.command!r}")

    report = run_experiment(load_config(args, kind), command=command, **params)
    return {"output_dir": report.output_dir, "status": report.manifest.status,
            "notes": report.manifest.notes, "summary": report.summary}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    logger.debug(f"Output root {get_settings().output_root_path}")

    codes: Dict[str, int] = {}
    try:
        with handle_cli_errors(codes):
            result = dispatch(args)
            print(json.dumps(result, indent=2, sort_keys=True))
    finally:
        logging.shutdown()
    return codes["code"]


if __name__ == "__main__":
    sys.exit(main())
