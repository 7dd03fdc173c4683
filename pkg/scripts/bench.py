"""Inference latency and throughput sweep over batch and graph sizes.

Example:
    python scripts/bench.py --batch-sizes 100,200,300,400,500 --graph-sizes 2000,4000,6000
"""
from __future__ import annotations

import argparse

from alerttgn.cli import bench_rows
from alerttgn.desk import desk_config


def int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",")]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--aggregator", default="bita")
    ap.add_argument("--batch-sizes", type=int_list, default=[100, 200, 300, 400, 500])
    ap.add_argument("--graph-sizes", type=int_list, default=[2000, 4000, 6000])
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--full-size", action="store_true", help="default widths instead of the desk widths")
    args = ap.parse_args()
    cfg = desk_config(args.aggregator)
    if args.full_size:
        from alerttgn.config import Config
        cfg = Config(aggregator=args.aggregator)
    print(f"{'edges':>6} {'batch':>5} {'median_ms':>10} {'p95_ms':>8} {'p99_ms':>8} {'edges/s':>9}")
    for r in bench_rows(cfg, args.batch_sizes, args.graph_sizes, repeats=args.repeats):
        print(f"{r['graph_edges']:>6} {r['batch_size']:>5} {r['latency_ms_median']:>10.4f} "
              f"{r['latency_ms_p95']:>8.4f} {r['latency_ms_p99']:>8.4f} {r['throughput_eps']:>9.0f}")


if __name__ == "__main__":
    main()
