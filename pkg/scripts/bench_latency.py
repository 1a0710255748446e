#!/usr/bin/env python3
"""Measure in-memory retrieve latency against built pipeline artifacts.

Replays request signal sets sampled from the generated log and prints
latency percentiles plus the aggregate work counters.
"""

from __future__ import annotations

import argparse
import os
import random
import sys
import time

from adretrieval.cli import load_config, split_records
from adretrieval.clicklog import read_catalog, read_log
from adretrieval.invindex import load_index
from adretrieval.model import load_model
from adretrieval.pricing import Pricer
from adretrieval.retrieval import RetrievalRequest, RetrievalStats, retrieve


def run(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--dir", help="artifact directory (default: config paths.dir)")
    parser.add_argument("--requests", type=int, default=500)
    parser.add_argument("--topn", type=int, default=100)
    parser.add_argument("--seed", default="bench")
    args = parser.parse_args(argv)

    config = load_config(args.config)
    base = args.dir or config.dir
    path = lambda name: os.path.join(base, getattr(config, name))
    catalog = read_catalog(path("catalog"))
    records = read_log(path("log"))
    model = load_model(path("model"))
    rw_index = load_index(path("index_rewrite"))
    sel_index = load_index(path("index_select"))
    train, _, _, _ = split_records(config, records)
    pricer = Pricer.from_history(catalog, train, (config.cvr_alpha, config.cvr_beta))

    rng = random.Random(args.seed)
    picks = rng.sample(records, min(args.requests, len(records)))
    requests = [RetrievalRequest(signals=rec.signals, n=args.topn) for rec in picks]
    for req in requests[:10]:  # warm-up
        retrieve(req, rw_index, sel_index, model, pricer)

    stats = RetrievalStats()
    timings = []
    returned = 0
    for req in requests:
        t0 = time.perf_counter()
        results = retrieve(req, rw_index, sel_index, model, pricer, stats)
        timings.append(time.perf_counter() - t0)
        returned += len(results)
    timings.sort()
    pct = lambda p: timings[min(len(timings) - 1, int(p * len(timings)))] * 1000.0
    print(f"requests {len(requests)}  topn {args.topn}  "
          f"results/request {returned / len(requests):.1f}")
    print(f"p50 {pct(0.50):.2f}ms  p90 {pct(0.90):.2f}ms  p99 {pct(0.99):.2f}ms  "
          f"max {timings[-1] * 1000.0:.2f}ms")
    print(f"index lookups {stats.index_lookups}  "
          f"candidates examined {stats.candidates_examined}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
