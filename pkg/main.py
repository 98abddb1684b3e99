# =============================================================
# ImpactLens - Command Line Entry Point
# Usage: python main.py <command> [--config run.env] [flags]
#
# Commands: ingest, fit, select, forecast, effects,
#           classify-eval, describe, simulate, report
# =============================================================

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from config.settings import load_config
from services.errors import ImpactLensError
from services.pipeline_service import COMMANDS, EXIT_STAGE_ERROR, run_pipeline

# ------------------------------------------------------------------ #
# Logging
# ------------------------------------------------------------------ #
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)


_HELP = {
    "ingest": "Validate source files and write the daily panel.",
    "fit": "Estimate the SUR system on data before the cutoff.",
    "select": "Cross-validate lag depths and time-effect specifications.",
    "forecast": "Bootstrap the counterfactual path from the cutoff.",
    "effects": "Windowed effects, breakeven and optional holdout check.",
    "classify-eval": "Confusion matrices for the type classifier.",
    "describe": "Descriptive tables (annual, monthly, weekly, purchasers, retailers).",
    "simulate": "Generate a synthetic data bundle with known effects.",
    "report": "ingest + fit + effects + describe (+ classify-eval when labels are set).",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="impactlens",
        description="Causal impact of a dated intervention on daily multi-series counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        cmd.add_argument("--config", help="KEY=VALUE run configuration file")
        cmd.add_argument("--seed", type=int, help="Master seed for every random stream")
        cmd.add_argument("--cutoff", help="Intervention date (YYYY-MM-DD), day 0 of the forecast")
        cmd.add_argument("--bootstrap-reps", type=int, help="Bootstrap replicates")
        cmd.add_argument("--confidence", type=float, help="Interval level, e.g. 0.95")
        cmd.add_argument("--output", help="Report bundle directory")
        cmd.add_argument("--synth-config", help="JSON file with simulation settings")
        cmd.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    overrides = {
        "SEED": args.seed,
        "CUTOFF": args.cutoff,
        "BOOTSTRAP_REPS": args.bootstrap_reps,
        "CONFIDENCE": args.confidence,
        "OUTPUT_DIR": args.output,
        "SYNTH_CONFIG_PATH": args.synth_config,
    }
    try:
        config = load_config(args.config, overrides)
    except ImpactLensError as e:
        logger.error("configuration rejected | stage=%s | %s", e.stage, e.message)
        return EXIT_STAGE_ERROR

    logger.info("impactlens %s | seed=%d | output=%s", args.command, config.seed, config.paths.output_dir)
    return run_pipeline(config, args.command)


if __name__ == "__main__":
    sys.exit(main())
