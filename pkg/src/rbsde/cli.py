"""Command line front end.

Subcommands: validate, solve, converge, oracle-compare, engine-compare.
Exit codes: 0 pass, 1 configuration error, 2 assertion failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import ConfigError, load_config
from .experiments import (run_convergence, run_engine_compare,
                          run_oracle_compare, run_single, run_validate)

EXIT_PASS = 0
EXIT_CONFIG = 1
EXIT_ASSERT = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rbsde",
        description="Reflected-BSDE / optimal-switching solver and study harness")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("validate", "check structure condition, terminal membership and flags"),
            ("solve", "one backward solve, emitting solution.csv and summary.csv"),
            ("converge", "empirical rate study against a finest-grid reference"),
            ("oracle-compare", "scheme vs strategy-enumeration oracle on a tiny instance"),
            ("engine-compare", "regression engine vs lattice engine with bootstrap bands")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("config", help="path to the JSON configuration")
        q.add_argument("--seed", type=int, default=None, help="override the config seed")
        q.add_argument("--out", default=None, metavar="DIR", help="output directory")
        q.add_argument("--threads", type=int, default=1,
                       help="parallel solves inside a sweep")
    return p


def _load(args):
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read configuration: {exc}"])
    if args.seed is not None:
        doc = dict(doc)
        doc["seed"] = args.seed
    return load_config(doc)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "validate":
            report = run_validate(cfg)
            print(report)
            return EXIT_PASS if report.ok else EXIT_ASSERT

        if args.command == "solve":
            summary = run_single(cfg, out_dir=args.out)
            parts = [f"{k}={summary[k]:.12g}" if isinstance(summary[k], float)
                     else f"{k}={summary[k]}" for k in summary]
            print("solve: " + " ".join(parts))
            return EXIT_PASS

        if args.command == "converge":
            table = run_convergence(cfg, threads=args.threads)
            if args.out is not None:
                import os
                os.makedirs(args.out, exist_ok=True)
                table.to_csv(os.path.join(args.out, "convergence.csv"))
            print(table)
            if table.degenerate or cfg.assert_slope is False:
                return EXIT_PASS
            threshold = float(cfg.assert_slope)
            slopes = table.slopes[np.isfinite(table.slopes)]
            ok = slopes.size > 0 and bool(np.all(slopes >= threshold))
            print(f"slope assertion (>= {threshold:g}): {'PASS' if ok else 'FAIL'}")
            return EXIT_PASS if ok else EXIT_ASSERT

        if args.command == "oracle-compare":
            report = run_oracle_compare(cfg, out_dir=args.out)
            print(report)
            return EXIT_PASS if report.ok else EXIT_ASSERT

        if args.command == "engine-compare":
            report = run_engine_compare(cfg, out_dir=args.out)
            print(report)
            return EXIT_PASS if report.ok else EXIT_ASSERT
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # preconditions (z-dependent rate runs, oversized oracles, bad grids)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
