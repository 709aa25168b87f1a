"""Command-line entry points: run a sweep, train an estimator, run checks.

The library is the primary interface; this thin wrapper exists so whole
experiments are reproducible from a config file:

    bevalign run --config experiment.json [--out DIR] [--dump-flow]
    bevalign train --config experiment.json --out DIR
    bevalign check [--config experiment.json]

The default output directory comes from $BEVALIGN_OUT (falling back to
./out). Timing goes to stderr via logging; result files are deterministic.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .harness import check_command, default_config, load_config, run_sweep, train_command


def _default_out() -> str:
    return os.environ.get("BEVALIGN_OUT", "out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevalign",
        description="Deterministic BEV sensor-asynchrony alignment experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured scene x offset x pipeline sweep")
    run_p.add_argument("--config", required=True, help="experiment config (JSON)")
    run_p.add_argument("--out", default=None, help="output directory (default: $BEVALIGN_OUT)")
    run_p.add_argument(
        "--dump-flow", action="store_true", help="also write per-run dynamic flow fields"
    )

    train_p = sub.add_parser("train", help="train the configured flow estimator")
    train_p.add_argument("--config", required=True, help="experiment config (JSON)")
    train_p.add_argument("--out", required=True, help="output directory")

    check_p = sub.add_parser("check", help="run gradient/scatter/round-trip consistency suites")
    check_p.add_argument("--config", default=None, help="experiment config (JSON, optional)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "run":
        config = load_config(args.config)
        out = args.out or _default_out()
        rows = run_sweep(config, out, dump_flow=args.dump_flow)
        print(f"wrote {len(rows)} rows to {out}/results.csv")
        return 0
    if args.command == "train":
        config = load_config(args.config)
        _, curve = train_command(config, args.out)
        print(
            f"trained {config.estimator_kind}: loss {curve[0].total:.4f} -> "
            f"{curve[-1].total:.4f}; wrote {args.out}/estimator.bfpr"
        )
        return 0
    if args.command == "check":
        config = load_config(args.config) if args.config else default_config()
        results = check_command(config)
        ok = True
        for name, (passed, detail) in results.items():
            print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
            ok = ok and passed
        return 0 if ok else 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
