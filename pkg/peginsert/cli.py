"""Command-line interface for peginsert.

Subcommands:
    train <spec>               train every seed of an experiment
    eval <checkpoint> <spec>   evaluate a checkpoint (or a run directory's best one)
    ablate <matrix>            run an ablation matrix and write the comparison tables
    replay <csv>               re-check a logged episode and chart it
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict

from peginsert import __version__
from peginsert.config import (
    apply_assignments,
    get_config_value,
    load_config,
    run_root,
    validate_config,
)
from peginsert.harness import (
    SUMMARY_COLUMNS,
    ExperimentSpec,
    append_csv,
    best_checkpoint,
    evaluate,
    load_matrix,
    replay,
    run_ablation,
    train,
)

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)
logger = logging.getLogger(__name__)


def parse_args(argv=None):
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        description="Train and evaluate peg-in-hole insertion policies with a dynamic safety lock."
    )
    parser.add_argument("--config", "-c", type=str, help="Configuration file path (YAML)")
    parser.add_argument(
        "--run-dir", "-r", type=str,
        help="Root directory for run outputs (default: $PEGINSERT_RUN_DIR or ./runs)",
    )
    parser.add_argument(
        "--set", "-s", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a configuration value, e.g. ppo.learning_rate=1e-4 (repeatable; "
        "experiment spec sections still apply on top)",
    )
    parser.add_argument("--debug", "-d", action="store_true", help="Enable debug output")
    parser.add_argument(
        "--version", "-v", action="version", version=f"peginsert {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", help="Train an experiment spec")
    train_parser.add_argument("spec", type=str, help="Experiment spec (YAML)")
    train_parser.add_argument("--seed", type=int, help="Train only this seed")
    train_parser.add_argument(
        "--resume", action="store_true", help="Continue from the latest checkpoint"
    )

    eval_parser = commands.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("checkpoint", type=str, help="Checkpoint file or run directory")
    eval_parser.add_argument("spec", type=str, help="Experiment spec (YAML)")
    eval_parser.add_argument("--episodes", type=int, help="Episode count (default: spec)")
    eval_parser.add_argument("--seed", type=int, help="Evaluation seed (default: first spec seed)")
    eval_parser.add_argument("--shape", type=str, help="Evaluate on another peg shape")
    eval_parser.add_argument(
        "--gap-proportion", type=float, help="Gap proportion of the evaluation hole"
    )
    eval_parser.add_argument(
        "--output", "-o", type=str, help="Summary CSV to append to (default: <run-dir>/<spec>/eval.csv)"
    )
    eval_parser.add_argument(
        "--trajectories", type=str, help="Directory to log every evaluation episode into"
    )

    ablate_parser = commands.add_parser("ablate", help="Run an ablation matrix")
    ablate_parser.add_argument("matrix", type=str, help="Ablation matrix (YAML)")
    ablate_parser.add_argument(
        "--workers", "-w", type=int, default=1, help="Cells trained in parallel (default: 1)"
    )

    replay_parser = commands.add_parser("replay", help="Replay a trajectory CSV")
    replay_parser.add_argument("csv", type=str, help="Trajectory CSV")
    replay_parser.add_argument("--svg", type=str, help="Chart output (default: next to the CSV)")

    return parser.parse_args(argv)


def run_train(args, config: Dict, root: Path) -> bool:
    spec = ExperimentSpec.from_file(args.spec, config)
    seeds = [args.seed] if args.seed is not None else list(spec.seeds)
    for seed in seeds:
        train(spec, root / spec.name / f"seed_{seed}", seed, resume=args.resume)
    return True


def run_eval(args, config: Dict, root: Path) -> bool:
    spec = ExperimentSpec.from_file(args.spec, config)
    checkpoint = Path(args.checkpoint)
    if checkpoint.is_dir():
        checkpoint = best_checkpoint(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")

    seed = spec.seeds[0] if args.seed is None else args.seed
    report = evaluate(
        checkpoint,
        spec,
        seed=seed,
        episodes=args.episodes,
        shape=args.shape,
        proportion=args.gap_proportion,
        trajectory_dir=args.trajectories,
    )
    output = Path(args.output) if args.output else root / spec.name / "eval.csv"
    append_csv(output, SUMMARY_COLUMNS, report.summary_row(spec, seed))
    logger.info(f"Appended evaluation summary to {output}")
    print(
        f"{spec.name} {checkpoint.name}: success {report.success_mean:.4f} "
        f"(var {report.success_var:.4f}), reward {report.reward_mean:.4f} "
        f"(var {report.reward_var:.4f}) over {report.count} episodes"
    )
    return True


def run_ablate(args, config: Dict, root: Path) -> bool:
    name, specs = load_matrix(args.matrix, config)
    report = run_ablation(specs, root / name, workers=args.workers)
    print((report.output_dir / "summary.md").read_text())
    if report.failures:
        logger.error(f"{report.failures} ablation cell(s) failed; see {report.output_dir / 'summary.csv'}")
    return report.failures == 0


def run_replay(args, config: Dict, root: Path) -> bool:
    result = replay(args.csv, args.svg, config)
    print(result.summary)
    return True


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "ablate": run_ablate,
    "replay": run_replay,
}


def main(argv=None):
    """Main entry point."""
    try:
        # Parse command-line arguments
        args = parse_args(argv)

        # Load configuration
        config = load_config(args.config)
        apply_assignments(config, args.overrides)
        if not validate_config(config):
            logger.error("Configuration is invalid")
            sys.exit(1)

        # Set log level
        if args.debug:
            logging.getLogger().setLevel(logging.DEBUG)
        else:
            level = str(get_config_value(config, "logging.level", "INFO")).upper()
            logging.getLogger().setLevel(getattr(logging, level, logging.INFO))

        root = run_root(args.run_dir)
        success = COMMANDS[args.command](args, config, root)

        # Exit with appropriate status code
        sys.exit(0 if success else 1)

    except Exception as e:
        logger.error(f"Error: {e}", exc_info=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
