"""Command-line entry point for budget-constrained ensemble federated learning experiments."""
import argparse
import logging
import sys
from typing import Dict, List, Optional

from src.config import parse_config
from src.exceptions import ConfigError, EflError
from src.report_generator import write_report
from src.runner import build_zoo, run

logger = logging.getLogger("efl_fg")

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


def configure_logging(quiet: bool = False, verbose: bool = False) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )


def log_progress(status: Dict) -> None:
    if status["status"] == "complete" or status["t"] % 500 == 0:
        logger.info("%s: round %d (%.0f%%)", status["algorithm"], status["t"], 100 * status["progress"])


def non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid int value: '{text}'") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efl-fg",
        description="Simulate budget-constrained ensemble federated learning with feedback graphs.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    verbosity.add_argument("--verbose", action="store_true", help="log every round")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run every algorithm and seed of a config")
    run_parser.add_argument("--config", required=True, help="experiment config (JSON)")
    run_parser.add_argument("--out", help="output directory (overrides output_dir)")
    run_parser.add_argument("--seed-override", type=non_negative_int, help="run only this seed")

    validate_parser = commands.add_parser("validate", help="check a config without running it")
    validate_parser.add_argument("--config", required=True, help="experiment config (JSON)")

    zoo_parser = commands.add_parser("zoo", help="train the model zoo and save it")
    zoo_parser.add_argument("--config", required=True, help="experiment config (JSON)")
    zoo_parser.add_argument("--dump", required=True, help="catalog JSON to write")

    report_parser = commands.add_parser("report", help="write Markdown, PDF and HTML reports for a finished run")
    report_parser.add_argument("--out", required=True, help="output directory of a finished run")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(quiet=args.quiet, verbose=args.verbose)

    try:
        if args.command == "report":
            for kind, path in write_report(args.out).items():
                logger.info("%s: %s", kind, path)
            return EXIT_OK

        config = parse_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: OK")
            return EXIT_OK
        if args.command == "zoo":
            catalog = build_zoo(config, args.dump)
            logger.info("Saved %d models to %s", catalog.size, args.dump)
            return EXIT_OK

        result = run(config, output_dir=args.out, seed_override=args.seed_override, progress_callback=log_progress)
        if not result.ok:
            for failure in result.failures:
                logger.error("%s seed %d: %s", failure.algorithm.value, failure.seed, failure.error)
            return EXIT_RUNTIME_ERROR
        return EXIT_OK
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG_ERROR
    except EflError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
