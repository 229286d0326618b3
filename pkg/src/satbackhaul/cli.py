"""Command-line entry point: run campaigns, list builtins, validate scenario files.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .scenario import (ConfigError, builtin_names, builtin_summary, builtin_scenario,
                       load_scenario)
from .campaign import run_campaign

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="satbackhaul",
        description="Desk-scale GEO-satellite LTE backhaul simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario campaign and write CSV results")
    run.add_argument("--scenario", required=True,
                     help="builtin:<name> or path to a scenario JSON file")
    run.add_argument("--cra", type=int, default=None, metavar="KBPS",
                     help="constant assignment on the return link")
    run.add_argument("--rbdc", type=int, default=None, metavar="KBPS",
                     help="on-demand cap on the return link")
    run.add_argument("--pep", choices=["on", "off"], default=None,
                     help="split-connection proxies at the satellite segment edges")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--reps", type=int, default=None,
                     help="repetitions (seeds seed, seed+1, ...)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--parallel", type=int, default=1,
                     help="worker processes for independent repetitions")

    sub.add_parser("list-scenarios", help="list built-in scenarios")

    val = sub.add_parser("validate", help="validate a scenario file")
    val.add_argument("path")
    return p


def cli(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "list-scenarios":
            for name in builtin_names():
                print(f"{name}  {builtin_summary(name)}")
            return EXIT_OK
        if args.command == "validate":
            load_scenario(args.path)
            print(f"{args.path}: ok")
            return EXIT_OK
        # run
        if args.scenario.startswith("builtin:"):
            name = args.scenario.split(":", 1)[1]
            pep = None if args.pep is None else args.pep == "on"
            spec = builtin_scenario(name, cra_kbps=args.cra, rbdc_kbps=args.rbdc,
                                    pep=pep, seed=args.seed, repetitions=args.reps)
        else:
            spec = load_scenario(args.scenario)
            if args.cra is not None:
                spec.cra_bps = args.cra * 1000
            if args.rbdc is not None:
                spec.rbdc_max_bps = args.rbdc * 1000
            if args.pep is not None:
                spec.pep = args.pep == "on"
            if args.seed is not None:
                spec.seed = args.seed
            if args.reps is not None:
                spec.repetitions = args.reps
            spec = spec.validated()
        result = run_campaign(spec, args.out, parallel=args.parallel)
        print(f"wrote {result['records']} and {result['summary']}")
        return EXIT_OK
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
