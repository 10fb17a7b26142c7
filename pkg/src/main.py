"""
epabc - command-line entry point

Verbs:
    run <config>        EP-ABC run; writes trace.csv, final.json, acceptance.csv
    heatmap <config>    correlation-distance grid; writes heatmap.csv
    compare <config>    same model under several schedules; writes comparison.csv
    calibrate <config>  epsilon calibration rounds; writes calibration.csv
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from src.core.config import settings
from src.core.errors import EPABCError
from src.core.logging import log_error, logger
from src.schemas.results import ErrorDetail, ErrorResponse
from src.services.runner import calibrate, compare_schedules, emit_heatmap, run_from_config

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CONFIG = 2


def _print_error(code: str, message: str) -> None:
    payload = ErrorResponse(error=ErrorDetail(code=code, message=message))
    print(payload.model_dump_json(), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.APP_NAME, description="EP-ABC inference engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run EP-ABC from a config file"),
        ("heatmap", "write the correlation-distance heat map"),
        ("compare", "compare update schedules on one model"),
        ("calibrate", "calibrate epsilon over repeated runs"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", type=Path, help="TOML run configuration")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.info(f"Starting {settings.APP_NAME} v{settings.APP_VERSION} | command={args.command}")

    try:
        if args.command == "run":
            outcome = run_from_config(args.config)
            if outcome.error is not None:
                _print_error(outcome.error.code, outcome.error.message)
                return EXIT_RUN_FAILED
        elif args.command == "heatmap":
            emit_heatmap(args.config)
        elif args.command == "compare":
            compare_schedules(args.config)
        elif args.command == "calibrate":
            calibrate(args.config)
    except EPABCError as e:
        log_error(e, context=args.command, include_traceback=False)
        _print_error(e.code, str(e))
        return EXIT_CONFIG if e.code == "CONFIG_ERROR" else EXIT_RUN_FAILED
    except Exception as e:
        log_error(e, context=args.command)
        _print_error("INTERNAL_ERROR", f"{type(e).__name__}: {e}")
        return EXIT_RUN_FAILED

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
