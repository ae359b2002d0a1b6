"""Command-line entry point: ``snpns run | verify | resume | plot``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError
from .harness import EXIT_CONFIG, EXIT_OK, plot_emit, resume, run, verify


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snpns", description="Stochastic electrokinetic flow simulations.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment named in a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    v = sub.add_parser("verify", help="parse and validate a config file")
    v.add_argument("config")
    c = sub.add_parser("resume", help="continue a simulate run from a checkpoint")
    c.add_argument("checkpoint")
    c.add_argument("--out")
    g = sub.add_parser("plot", help="write gnuplot scripts for the CSVs in a run directory")
    g.add_argument("directory")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command == "run":
        return run(args.config, out=args.out, seed=args.seed, threads=args.threads)
    if args.command == "verify":
        try:
            cfg = verify(args.config)
        except (ConfigError, OSError) as exc:
            print(f"{args.config}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{args.config}: ok ({cfg.experiment}, config hash {cfg.digest()})")
        return EXIT_OK
    if args.command == "resume":
        return resume(args.checkpoint, out=args.out)
    try:
        for path in plot_emit(args.directory):
            print(path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
