"""Command-line entry point: `dnpr <kind|figure|validate> [options]`."""

import argparse
import logging
import sys
from typing import List, Optional

import config
from errors import ConfigParseError, ConfigurationError, DnprError, OutputError
from figures import FIGURES, figure_command
from runconfig import EXPERIMENT_KINDS, FORMATS, dump_config, parse_config
from runner import ExperimentRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=config.TOOL_NAME,
        description="Simulate microwave-free 13C DNP through NV-P1 level anti-crossings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.TOOL_VERSION}")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="Logging level (default: %(default)s)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--seed", type=int, help="Master random seed (overrides the config)")
        sub.add_argument("--out", help="Output path (default: stdout)")
        sub.add_argument("--format", choices=FORMATS, help="Output format (default: from config, else csv)")

    for kind in EXPERIMENT_KINDS:
        sub = subparsers.add_parser(kind, help=f"Run a {kind} experiment")
        sub.add_argument("--config", help="TOML run configuration (default: built-in defaults)")
        add_common(sub)

    figure = subparsers.add_parser("figure", help="Regenerate the data behind a figure")
    figure.add_argument("name", help=f"One of: {', '.join(sorted(FIGURES))}")
    figure.add_argument("--out", default=".", help="Output directory (default: current directory)")
    figure.add_argument("--seed", type=int, help="Master random seed")
    figure.add_argument("--format", choices=FORMATS, default="csv", help="Output format")

    validate = subparsers.add_parser("validate", help="Parse and validate a config, printing its canonical form")
    validate.add_argument("--config", required=True, help="TOML run configuration")
    return parser


def read_config_text(path: Optional[str], kind: Optional[str]) -> str:
    if path is None:
        return f'schema_version = {config.SCHEMA_VERSION}\n\n[experiment]\nkind = "{kind}"\n'
    try:
        with open(path, encoding="utf-8") as handle:
            return handle.read()
    except UnicodeDecodeError as e:
        raise ConfigParseError(f"{path} is not valid UTF-8: {e}") from e
    except OSError as e:
        raise OutputError(f"Cannot read config {path}: {e}") from e


def run_command(args: argparse.Namespace) -> int:
    if args.command == "figure":
        written = figure_command(args.name, args.out, args.seed, args.format)
        for path in written:
            print(path)
        return EXIT_OK

    if args.command == "validate":
        run_config = parse_config(read_config_text(args.config, None))
        sys.stdout.write(dump_config(run_config))
        logger.info(f"Config valid: {run_config.kind}, hash {run_config.config_hash}")
        return EXIT_OK

    run_config = parse_config(read_config_text(args.config, args.command), kind=args.command)
    run_config = run_config.with_overrides(seed=args.seed, out=args.out, fmt=args.format)

    runner = ExperimentRunner(run_config)
    envelope = runner.run()
    written = runner.write(envelope)
    for path in written:
        logger.info(f"Wrote {path}")
    if envelope.warnings:
        logger.info(f"Completed with {len(envelope.warnings)} warning(s)")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run the command and map failures to exit codes.

    Returns:
        0 on success, 2 for configuration errors, 3 for runtime errors, 4 for I/O errors
    """
    args = build_parser().parse_args(argv)
    config.setup_logging(args.log_level)

    try:
        return run_command(args)
    except ConfigurationError as e:
        logger.error(f"Configuration error in {args.command}: {e}")
        return EXIT_CONFIG
    except OutputError as e:
        logger.error(f"I/O error in {args.command}: {e}")
        return EXIT_IO
    except DnprError as e:
        logger.error(f"{type(e).__name__} during {args.command}: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error during {args.command}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
