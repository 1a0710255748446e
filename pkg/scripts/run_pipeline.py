#!/usr/bin/env python3
"""Run the whole offline pipeline with one config: generate a click log,
initialize the network, train the edge-weight model, build both indexes,
then report offline AUC and the paired simulation lifts."""

from __future__ import annotations

import argparse
import sys

from adretrieval.cli import main as cli_main

STAGES = ("gen", "init-net", "train", "build-index", "eval", "simulate")


def run(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="override the pipeline seed")
    parser.add_argument("--skip-simulate", action="store_true",
                        help="stop after the offline eval")
    args = parser.parse_args(argv)
    base = []
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]
    for stage in STAGES:
        if stage == "simulate" and args.skip_simulate:
            continue
        print(f"== {stage}")
        code = cli_main(base + [stage])
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
