"""Paired aggregator comparison on the desk-scale synthetic stream.

Example:
    python scripts/compare_aggregators.py --seeds 0-9 --aggregators bita,last
    python scripts/compare_aggregators.py --seeds 0-3 --set lr=0.001 --spec period_spread=2
"""
from __future__ import annotations

import argparse
import time

from alerttgn.config import parse_overrides
from alerttgn.desk import desk_config, desk_run, desk_stream
from alerttgn.engine import partitions_for


def seed_list(text: str) -> list[int]:
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def spec_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, value = pair.split("=", 1)
        out[key] = value if key == "late_targets" else float(value) if "." in value else int(value)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=seed_list, default=list(range(10)))
    ap.add_argument("--aggregators", default="bita,last")
    ap.add_argument("--set", action="append", default=[], help="config override key=value")
    ap.add_argument("--spec", action="append", default=[], help="synthetic stream override key=value")
    args = ap.parse_args()
    tags = args.aggregators.split(",")
    over, spec = parse_overrides(args.set), spec_overrides(args.spec)
    wins = {t: 0 for t in tags[1:]}
    ordered = 0
    for seed in args.seeds:
        stream = desk_stream(seed, **spec)
        parts = partitions_for(desk_config(seed=seed, **over), stream)
        cells, results = [], {}
        for tag in tags:
            t0 = time.perf_counter()
            r = desk_run(tag, seed, stream, parts, **over)
            results[tag] = r
            tr, ind = r.transductive, r.inductive
            cells.append(f"{tag} ep{r.best_epoch}/{r.epochs_run} tr={tr.auc:.4f} ind={ind.auc or float('nan'):.4f} "
                         f"rec={tr.classes['macro_recall']:.2f} {time.perf_counter() - t0:.0f}s")
        first = results[tags[0]]
        for t in tags[1:]:
            wins[t] += first.transductive.auc > results[t].transductive.auc
        ordered += first.inductive.auc is not None and first.transductive.auc >= first.inductive.auc
        print(f"seed={seed} events={len(stream)} | " + " | ".join(cells), flush=True)
    n = len(args.seeds)
    for t, w in wins.items():
        print(f"{tags[0]} beats {t} on transductive AUC in {w}/{n} seeds")
    print(f"{tags[0]} transductive >= inductive in {ordered}/{n} seeds")


if __name__ == "__main__":
    main()
