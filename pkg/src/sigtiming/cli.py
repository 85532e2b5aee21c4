"""Command-line entry point.

    sigtiming run --config run.json [--stages simulate-features] [--seed N] [--workspace DIR] [--overwrite]
    sigtiming verify [--only 1,3,6] [--workspace DIR]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .core import DomainError
from .pipeline import WORKSPACE_ENV, ConfigError, RunConfig, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ACCEPTANCE = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sigtiming", description="Estimate pre-timed signal timing from probe trajectories.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run pipeline stages")
    run.add_argument("--config", required=True, help="JSON run configuration")
    run.add_argument("--stages", default="all",
                     help="comma list or ranges of: simulate, extract, features, split, tune, train, evaluate, report")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--workspace", help=f"artifact directory (default: config 'workspace' or ${WORKSPACE_ENV})")
    run.add_argument("--overwrite", action="store_true", help="replace artifacts built from another configuration")

    ver = sub.add_parser("verify", help="run the acceptance checks and print a pass/fail table")
    ver.add_argument("--only", help="comma list of criterion numbers")
    ver.add_argument("--workspace", help="keep pipeline artifacts here (reused on the next verify)")
    return p


def _summary(report: dict) -> str:
    lines = []
    for model in ("cycle", "red", "green"):
        m = report[model]["metrics"]["test"]
        if m is None:
            lines.append(f"{model:>5}: no test points")
            continue
        r2 = "n/a" if m["r2"] is None else f"{m['r2']:.4f}"
        lines.append(f"{model:>5}: test MAE {m['mae']:.3f} s  R2 {r2}  n={m['n_points']}")
    return "\n".join(lines)


def _cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    res = run_pipeline(cfg, args.stages, args.workspace, args.overwrite)
    print(json.dumps(res.status))
    if res.report is not None:
        print(_summary(res.report))
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .acceptance import CRITERIA, format_table, run_acceptance

    numbers = None
    if args.only:
        try:
            numbers = sorted({int(x) for x in args.only.split(",") if x.strip()})
        except ValueError as exc:
            raise ConfigError(f"--only takes criterion numbers: {exc}") from exc
        unknown = set(numbers) - set(CRITERIA)
        if unknown:
            raise ConfigError(f"unknown criteria {sorted(unknown)}")
    results = run_acceptance(numbers, args.workspace)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_verify(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
