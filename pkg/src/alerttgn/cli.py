"""Command-line entry point: ingest, synth, train, eval, audit, bench, compare, report.

Exit codes: 0 success, 2 input/config error, 3 training failure, 4 audit
failed, 5 nondeterminism detected.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as F
from .aggregators import KINDS, ConfigError
from .config import Config, load_config, parse_overrides
from .container import ContainerError
from .engine import CausalityError, Engine, TrainingError, partitions_for, train
from .evaluation import (SCHEMA_VERSION, AuditInvalid, causality_audit, evaluate_both,
                         order_invariance_audit)
from .events import EventStream, IngestError, SynthSpec, parse_csv, stream_stats, synth_stream

log = logging.getLogger("alerttgn")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_AUDIT, EXIT_NONDET = 0, 2, 3, 4, 5
OUT_ENV = "ALERTTGN_OUT"


class InputError(Exception):
    pass


# ------------------------------------------------------------------ output


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(v).lower()
    s = str(v)
    return json.dumps(s) if (" " in s or "=" in s or not s) else s


def format_records(records: list[dict]) -> str:
    return "".join(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()) + "\n" for rec in records)


def write_report(path: Path, records: list[dict]) -> None:
    path.write_text(format_records(records))


def digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p and Path(p).is_file():
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, args, cfg: Config | None, inputs: list, outputs: list) -> Path:
    """Written before any computation starts."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION, "command": command, "argv": sys.argv[1:],
        "code_version": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "seed": cfg.seed if cfg else None, "config": cfg.to_dict() if cfg else None,
        "inputs": [str(p) for p in inputs], "input_digest": digest(*inputs),
        "outputs": [str(out / o) for o in outputs],
        "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "alerttgn-out")


def _config(args) -> Config:
    overrides = parse_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "aggregator", None):
        overrides["aggregator"] = args.aggregator
    return load_config(args.config, overrides)


def _load_stream(path) -> EventStream:
    try:
        return EventStream.load(path)
    except (OSError, ContainerError, KeyError) as exc:
        raise InputError(f"cannot read stream {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    out = _out_dir(args)
    target = Path(args.output) if args.output else out / "stream.bin"
    write_manifest(out, "ingest", args, None, [args.csv], [target.name, "ingest.report.txt"])
    try:
        stream = parse_csv(args.csv)
    except IngestError as exc:
        raise InputError(f"{args.csv}: {exc}") from exc
    except OSError as exc:
        raise InputError(str(exc)) from exc
    if len(stream) == 0:
        log.warning("%s contains no alert rows; writing an empty stream", args.csv)
    target.parent.mkdir(parents=True, exist_ok=True)
    stream.save(target)
    recs = [{"schema_version": SCHEMA_VERSION, **r} for r in stream_stats(stream, args.bin_width)]
    write_report(out / "ingest.report.txt", recs)
    print(format_records(recs[:1]), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args)
    target = Path(args.output) if args.output else out / "stream.bin"
    write_manifest(out, "synth", args, None, [], [target.name])
    spec = SynthSpec(n_attackers=args.attackers, n_victims=args.victims, horizon=args.hours * 3600.0,
                     late_fraction=args.late_fraction)
    stream = synth_stream(spec, F.Rng(args.seed or 0).derive(1))
    target.parent.mkdir(parents=True, exist_ok=True)
    stream.save(target)
    print(format_records(stream_stats(stream)[:1]), end="")
    return EXIT_OK


def _train_one(cfg: Config, stream: EventStream, out: Path, tag: str = ""):
    parts = partitions_for(cfg, stream)
    engine = Engine.for_stream(cfg, stream, parts.train)
    epochs = []
    result = train(engine, parts.train, parts.val, log=epochs.append)
    write_report(out / f"train{tag}.log.txt", [
        {"schema_version": SCHEMA_VERSION, "epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss,
         "improved": e.improved} for e in epochs
    ] + [{"schema_version": SCHEMA_VERSION, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
          "stopped_early": result.stopped_early}])
    return engine, parts, result


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    write_manifest(out, "train", args, cfg, [args.stream], ["checkpoint.bin", "train.log.txt"])
    stream = _load_stream(args.stream)
    engine, _, result = _train_one(cfg, stream, out)
    engine.checkpoint(out / "checkpoint.bin")
    print(f"best_epoch={result.best_epoch} best_val_loss={result.best_val_loss!r} epochs={len(result.epochs)}")
    return EXIT_OK


def _eval_records(reports: dict) -> list[dict]:
    recs = []
    for rep in reports.values():
        recs.extend(rep.records())
    return recs


def _write_curves(out: Path, reports: dict, tag: str = "") -> None:
    for mode, rep in reports.items():
        if rep.status != "ok":
            continue
        (out / f"roc{tag}.{mode}.csv").write_text(
            "threshold,fpr,tpr\n" + "".join(f"{a!r},{b!r},{c!r}\n" for a, b, c in rep.roc))
        (out / f"pr{tag}.{mode}.csv").write_text(
            "threshold,recall,precision\n" + "".join(f"{a!r},{b!r},{c!r}\n" for a, b, c in rep.pr))


def cmd_eval(args) -> int:
    out = _out_dir(args)
    write_manifest(out, "eval", args, None, [args.checkpoint, args.stream], ["eval.report.txt"])
    stream = _load_stream(args.stream)
    try:
        engine = Engine.restore(args.checkpoint, expect_nodes=stream.node_count)
    except (ContainerError, OSError) as exc:
        raise InputError(f"cannot read checkpoint: {exc}") from exc
    if engine.d_feat != stream.feature_width or engine.n_classes != len(stream.category_names):
        raise InputError("checkpoint dimensions do not match the stream")
    parts = partitions_for(engine.cfg, stream)
    reports = evaluate_both(engine, parts)
    if args.mode != "both":
        reports = {args.mode: reports[args.mode]}
    recs = _eval_records(reports)
    write_report(out / "eval.report.txt", recs)
    (out / "eval.summary.json").write_text(json.dumps(
        {m: {k: v for k, v in r.records()[0].items()} for m, r in reports.items()}, indent=2, sort_keys=True) + "\n")
    _write_curves(out, reports)
    print(format_records([r.records()[0] for r in reports.values()]), end="")
    return EXIT_OK


def cmd_audit(args) -> int:
    out = _out_dir(args)
    inputs = [args.stream] + ([args.checkpoint] if args.checkpoint else [])
    if args.checkpoint:
        try:
            meta_engine = Engine.restore(args.checkpoint)
        except (ContainerError, OSError) as exc:
            raise InputError(f"cannot read checkpoint: {exc}") from exc
        cfg = meta_engine.cfg
        params = meta_engine.param_arrays()
    else:
        cfg, params = _config(args), None
    write_manifest(out, "audit", args, cfg, inputs, [f"audit.{args.kind}.txt"])
    stream = _load_stream(args.stream)
    if args.kind == "causality":
        def make():
            eng = Engine.for_stream(cfg, stream, leaky_flush=args.leaky_flush)
            if params is not None:
                eng.load_param_arrays(params)
            return eng

        try:
            rep = causality_audit(make, stream, probes=args.probes, tolerance=args.tolerance)
        except AuditInvalid as exc:
            print(f"status=invalid reason={_fmt(str(exc))}")
            return EXIT_NONDET
        rec = rep.record()
        passed = rep.passed
    else:
        parts = partitions_for(cfg, stream)
        rep = order_invariance_audit(cfg, stream, parts, runs=args.runs, seed=cfg.seed,
                                     epochs=args.epochs, shuffle=not args.no_shuffle)
        rec = rep.record()
        passed = rep.mean_variance < args.mean_threshold and rep.max_variance < args.max_threshold
        rec.update(mean_threshold=args.mean_threshold, max_threshold=args.max_threshold, passed=passed)
    write_report(out / f"audit.{args.kind}.txt", [rec])
    print(format_records([rec]), end="")
    return EXIT_OK if passed else EXIT_AUDIT


def bench_rows(cfg: Config, batch_sizes, graph_sizes, seed: int = 0, repeats: int = 1) -> list[dict]:
    """Inference-only latency sweep; one row per (graph size, batch size)."""
    rows = []
    for n_edges in graph_sizes:
        # grow the horizon until the synthetic stream has at least n_edges events
        spec = SynthSpec(horizon=3600.0)
        stream = synth_stream(spec, F.Rng(seed).derive(1))
        while len(stream) < n_edges:
            spec = SynthSpec(horizon=spec.horizon * 1.5)
            stream = synth_stream(spec, F.Rng(seed).derive(1))
        stream = stream.subset(np.arange(n_edges))
        for bs in batch_sizes:
            eng = Engine.for_stream(cfg.replace(batch_size=bs), stream)
            lat_edge, full_lat, full_edges = [], 0.0, 0
            for _ in range(repeats):
                eng.init_memory()
                for i, sl in eng.batches(stream):
                    t0 = time.perf_counter()
                    eng.process_batch(stream.src[sl], stream.dst[sl], stream.t[sl], stream.features[sl],
                                      stream.category[sl], "eval", (0, 0, i))
                    dt = time.perf_counter() - t0
                    size = sl.stop - sl.start
                    if size == bs:
                        lat_edge.append(dt / size)
                        full_lat += dt
                        full_edges += size
            lat = np.array(lat_edge) * 1e3
            throughput = full_edges / full_lat if full_lat > 0 else float("nan")
            rows.append({
                "schema_version": SCHEMA_VERSION, "graph_edges": n_edges, "batch_size": bs,
                "batches": len(lat), "latency_ms_mean": float(lat.mean()),
                "latency_ms_median": float(np.percentile(lat, 50)), "latency_ms_p95": float(np.percentile(lat, 95)),
                "latency_ms_p99": float(np.percentile(lat, 99)), "throughput_eps": throughput,
                "throughput_from_mean_latency": 1e3 / float(lat.mean()),
            })
    return rows


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    write_manifest(out, "bench", args, cfg, [], ["bench.report.txt"])
    rows = bench_rows(cfg, args.batch_sizes, args.graph_sizes, cfg.seed, args.repeats)
    write_report(out / "bench.report.txt", rows)
    print(format_records(rows), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    tags = [t.strip() for t in args.aggregators.split(",") if t.strip()]
    unknown = [t for t in tags if t not in KINDS]
    if unknown:
        raise InputError(f"unknown aggregator(s) {unknown}; choose from {', '.join(KINDS)}")
    if len(set(tags)) < 2:
        raise InputError("compare needs at least two distinct aggregators")
    base = _config(args)
    out = _out_dir(args)
    write_manifest(out, "compare", args, base, [args.stream], ["compare.report.txt"])
    stream = _load_stream(args.stream)
    rows = []
    for tag in tags:
        cfg = base.replace(aggregator=tag)
        engine, parts, _ = _train_one(cfg, stream, out, tag=f".{tag}")
        reports = evaluate_both(engine, parts)
        for mode, rep in reports.items():
            first = rep.records()[0]
            rows.append({"schema_version": SCHEMA_VERSION, "aggregator": tag, "params": engine.model.num_parameters(),
                         **{k: v for k, v in first.items() if k != "schema_version"}})
    counts = {r["aggregator"]: r["params"] for r in rows}
    note = {"schema_version": SCHEMA_VERSION, "note": "parameter counts differ across aggregators at equal widths"
            if len(set(counts.values())) > 1 else "equal parameter counts"}
    write_report(out / "compare.report.txt", rows + [note])
    print(format_records(rows + [note]), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    write_manifest(out, "report", args, None, [args.stream], ["stats.report.txt"])
    stream = _load_stream(args.stream)
    recs = [{"schema_version": SCHEMA_VERSION, **r} for r in stream_stats(stream, args.bin_width)]
    write_report(out / "stats.report.txt", recs)
    print(format_records(recs), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--aggregator", choices=KINDS)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./alerttgn-out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="alerttgn", description="Temporal graph learning on alert streams.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="CSV alerts -> canonical stream file + stats")
    s.add_argument("csv")
    s.add_argument("--output")
    s.add_argument("--bin-width", type=float, default=30.0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic periodic attack stream")
    s.add_argument("--output")
    s.add_argument("--attackers", type=int, default=40)
    s.add_argument("--victims", type=int, default=60)
    s.add_argument("--hours", type=float, default=2.0)
    s.add_argument("--late-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="balance, split, mask and train")
    s.add_argument("stream")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("stream")
    s.add_argument("--mode", choices=("transductive", "inductive", "both"), default="both")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("audit", parents=[common], help="causality or batch-order audit")
    s.add_argument("stream")
    s.add_argument("--checkpoint")
    s.add_argument("--kind", choices=("causality", "order"), default="causality")
    s.add_argument("--probes", type=int, default=20)
    s.add_argument("--tolerance", type=float, default=0.0)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--no-shuffle", action="store_true")
    s.add_argument("--mean-threshold", type=float, default=1e-2)
    s.add_argument("--max-threshold", type=float, default=5e-2)
    s.add_argument("--leaky-flush", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("bench", parents=[common], help="inference latency / throughput sweep")
    s.add_argument("--batch-sizes", type=_int_list, default=[100, 200, 300, 400, 500])
    s.add_argument("--graph-sizes", type=_int_list, default=[2000, 4000, 6000])
    s.add_argument("--repeats", type=int, default=1)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("compare", parents=[common], help="train and evaluate several aggregators")
    s.add_argument("stream")
    s.add_argument("--aggregators", required=True, help="comma-separated tags")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("report", parents=[common], help="stream statistics report")
    s.add_argument("stream")
    s.add_argument("--bin-width", type=float, default=30.0)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, F.DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, CausalityError) as exc:
        diag = getattr(exc, "diagnostics", {})
        print(f"training failed: {exc} {json.dumps(diag, sort_keys=True)}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
