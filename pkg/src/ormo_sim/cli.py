"""
Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from .config import load_config, load_raw
from .exceptions import (
    SimConfigError,
    SimError,
    SimRegistryError,
    SimVerificationError,
)
from .experiment import dump_dataset, run_experiment, sweep, verify_experiment
from .report import compare_report

logger: logging.Logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_RUNTIME: int = 1
EXIT_CONFIG: int = 2
EXIT_VERIFY: int = 3


def _vary(value: str) -> tuple[str, list[str]]:
    key, sep, values = value.partition("=")
    if not sep or not key.strip() or not values.strip():
        raise argparse.ArgumentTypeError(f"expected `key=v1,v2,...`, got {value!r}")
    return key.strip(), [v.strip() for v in values.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser: argparse.ArgumentParser = argparse.ArgumentParser(
        prog="ormo-sim",
        description="Deterministic parameter-server simulator for asynchronous SGD"
        + " with ordered momentum.",
    )
    _ = parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_cmd: argparse.ArgumentParser = commands.add_parser("run", help="run every seed")
    _ = run_cmd.add_argument("config", type=Path)
    _ = run_cmd.add_argument("--jobs", type=int, default=1, help="parallel seeds")

    verify_cmd: argparse.ArgumentParser = commands.add_parser(
        "verify", help="run with the gap identities checked"
    )
    _ = verify_cmd.add_argument("config", type=Path)
    _ = verify_cmd.add_argument("--jsonl", type=Path, default=None, help="detail log")

    sweep_cmd: argparse.ArgumentParser = commands.add_parser(
        "sweep", help="run the cartesian product of varied keys"
    )
    _ = sweep_cmd.add_argument("config", type=Path)
    _ = sweep_cmd.add_argument(
        "--vary", type=_vary, action="append", required=True, metavar="KEY=V1,V2"
    )
    _ = sweep_cmd.add_argument("--jobs", type=int, default=1)

    report_cmd: argparse.ArgumentParser = commands.add_parser(
        "report", help="compare completed runs"
    )
    _ = report_cmd.add_argument("runs", type=Path, nargs="+")

    dump_cmd: argparse.ArgumentParser = commands.add_parser(
        "dump-dataset", help="write the generated dataset as CSV"
    )
    _ = dump_cmd.add_argument("config", type=Path)
    _ = dump_cmd.add_argument("--out", type=Path, default=None)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    match args.command:
        case "run":
            summary = run_experiment(load_config(args.config), jobs=args.jobs)
            print(f"wrote {len(summary.outcomes)} seed(s) to {summary.cfg.output}")

        case "verify":
            outcome = verify_experiment(load_config(args.config), jsonl=args.jsonl)
            print(f"{'seed':>6}  {'check':<20} {'max rel':>12} {'at':>6}  result")
            for seed in outcome.seeds:
                for report in seed.reports:
                    verdict: str = "pass" if report.passed else "FAIL"
                    if report.findings:
                        verdict += f" ({report.findings} finding(s))"
                    print(
                        f"{seed.seed:>6}  {report.name:<20} {report.max_rel:>12.3e}"
                        + f" {report.at:>6}  {verdict}"
                    )
                legal: str = "pass" if not seed.violations else "FAIL"
                print(f"{seed.seed:>6}  {'trace_legality':<20} {'':>12} {'':>6}  {legal}")
                for violation in seed.violations:
                    print(f"        {violation}")
                c = seed.constants
                print(f"        sigma2={c.sigma2:.6g} G2={c.G2:.6g} L={c.L:.6g}")
            outcome.raise_for_failures()

        case "sweep":
            raw: dict[str, str] = load_raw(args.config)
            summaries = sweep(raw, dict(args.vary), jobs=args.jobs)
            for summary in summaries:
                print(f"wrote {summary.cfg.output}")

        case "report":
            print(compare_report(args.runs).render(), end="")

        case "dump-dataset":
            print(f"wrote {dump_dataset(load_config(args.config), out=args.out)}")

    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args: argparse.Namespace = build_parser().parse_args(argv)
    level: int = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        return _dispatch(args)
    except (SimConfigError, SimRegistryError) as err:
        logger.error("%s", err)
        return EXIT_CONFIG
    except SimVerificationError as err:
        logger.error("%r", err)
        return EXIT_VERIFY
    except SimError as err:
        logger.error("%r", err)
        return EXIT_RUNTIME
    except OSError as err:
        logger.error("I/O failure: %s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
