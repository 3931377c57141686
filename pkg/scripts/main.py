"""Command-line entry point: python -m scripts.main <command> [options]."""

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from src.config import RunConfig, get_log_level, load_config
from src.exceptions import ConfigError, StageError
from src.pipeline import (cmd_beamform, cmd_estimate_patch, cmd_infer, cmd_metrics, cmd_pipeline, cmd_simulate,
                          cmd_train)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulm-aberration",
                                     description="Aberration estimation and correction for localization microscopy")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration or a run's config.snapshot")
    common.add_argument("--seed", type=int, help="Global seed")
    common.add_argument("--workers", type=int, help="Worker threads; 1 is bit-reproducible")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--paper-scale", action="store_true", help="Full-size probe, patches and dataset")
    common.add_argument("--estimator", choices=["coherence", "cvcnn", "ground-truth", "none"])
    common.add_argument("--fit-fraction", type=float, help="Fraction of the sequence used to fit the aberration map")
    common.add_argument("--log-level", help="Logging level (default from ULM_LOG_LEVEL or INFO)")

    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", parents=[common], help="Simulate a sequence or a training dataset")
    simulate.add_argument("--training", action="store_true", help="Write realigned patch/target pairs")
    simulate.add_argument("--count", type=int, help="Number of training samples")

    beamform = sub.add_parser("beamform", parents=[common], help="Beamform <out>/sequence")
    beamform.add_argument("--correction", help="Aberration CSV applied as a global correction")

    estimate = sub.add_parser("estimate", parents=[common], help="Estimate an aberration from one patch")
    estimate.add_argument("method", choices=["coherence"])
    estimate.add_argument("--patch", required=True, help="Patch ULMT file")

    train = sub.add_parser("train", parents=[common], help="Train the CV-CNN")
    train.add_argument("--dataset", help="Dataset directory (overrides dataset_dir)")

    infer = sub.add_parser("infer", parents=[common], help="Run the CV-CNN on a directory of patches")
    infer.add_argument("--patches", required=True, help="Directory of patch_*.ulmt files")
    infer.add_argument("--checkpoint", help="Checkpoint directory (overrides model_checkpoint)")

    pipeline = sub.add_parser("pipeline", parents=[common], help="Run the full correction pipeline")
    pipeline.add_argument("--input", help="Existing sequence directory used instead of simulating")
    metrics = sub.add_parser("metrics", parents=[common], help="Recompute metrics of an existing run")
    metrics.add_argument("--run", help="Run directory (defaults to --out)")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Load the config file, then apply command-line overrides."""
    config = load_config(args.config, paper_scale=args.paper_scale)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.estimator is not None:
        overrides["estimator"] = args.estimator
    if getattr(args, "dataset", None):
        overrides["dataset_dir"] = args.dataset
    if getattr(args, "checkpoint", None):
        overrides["model_checkpoint"] = args.checkpoint
    if args.fit_fraction is not None:
        overrides["ulm"] = replace(config.ulm, fit_fraction=args.fit_fraction)
    return replace(config, **overrides).validate() if overrides else config


def run_command(args: argparse.Namespace, config: RunConfig) -> None:
    if args.command == "simulate":
        path = cmd_simulate(config, args.training, args.count)
        logger.info(f"Simulation written to {path}")
    elif args.command == "beamform":
        cmd_beamform(config, args.correction)
    elif args.command == "estimate":
        estimate = cmd_estimate_patch(config, args.patch)
        logger.info(f"Estimated aberration with {len(estimate)} elements")
    elif args.command == "train":
        history = cmd_train(config)
        logger.info(f"Training finished after {len(history)} epochs")
    elif args.command == "infer":
        cmd_infer(config, args.patches)
    elif args.command == "pipeline":
        metrics = cmd_pipeline(config, args.input)
        logger.info(f"Pipeline metrics:\n{metrics.to_string(index=False)}")
    elif args.command == "metrics":
        cmd_metrics(config, args.run)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or get_log_level()).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        config = config_from_args(args)
        run_command(args, config)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        logger.error(f"{e}")
        return EXIT_STAGE
    except Exception as e:
        logger.error(f"Error in {args.command}: {e}")
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
