"""Ranking and classification metrics, evaluation protocol, causality and
batch-order audits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .engine import Engine, RunOutput, train
from .events import EventStream, Partitions

SCHEMA_VERSION = 1
EVAL_EPOCH = 1_000_000  # rng key for evaluation replays, independent of training length
NA = None


class MetricError(ValueError):
    pass


# ------------------------------------------------------------------ metrics


def auc(pos, neg) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) over all pairs."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise MetricError("auc needs at least one positive and one negative score")
    below = np.searchsorted(neg, pos, side="left").sum()
    ties = (np.searchsorted(neg, pos, side="right") - np.searchsorted(neg, pos, side="left")).sum()
    # integer counts; a single division at the end
    return float((2 * int(below) + int(ties)) / (2 * pos.size * neg.size))


def average_precision(pos, neg) -> float:
    """Mean precision at each positive's rank; ties put negatives first."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0:
        raise MetricError("average precision needs at least one positive")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, dtype=np.int64), np.zeros(neg.size, dtype=np.int64)])
    order = np.lexsort((labels, -scores))
    hits = np.cumsum(labels[order])
    ranks = np.arange(1, scores.size + 1)
    is_pos = labels[order] == 1
    return float(np.sum(hits[is_pos] / ranks[is_pos]) / pos.size)


def ranks(pos_scores, candidate_scores) -> np.ndarray:
    """1 + number of candidates scoring >= the positive (pessimistic ties)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    cand = np.asarray(candidate_scores, dtype=np.float64)
    if cand.ndim != 2 or cand.shape[0] != pos.size or cand.shape[1] == 0:
        raise MetricError("candidate scores must be an n x c matrix with c >= 1")
    return 1 + np.sum(cand >= pos[:, None], axis=1)


def mrr_hits(pos_scores, candidate_scores, ks=(1, 3)) -> tuple[float, dict[int, float]]:
    r = ranks(pos_scores, candidate_scores)
    if r.size == 0:
        raise MetricError("ranking needs at least one positive")
    return float(np.mean(1.0 / r)), {k: float(np.mean(r <= k)) for k in ks}


def _ratio(num: int, den: int):
    return NA if den == 0 else num / den


def per_class_metrics(probs, labels, n_classes: int, names=None) -> dict:
    """One-vs-rest confusion counts and rates per class, plus macro scores.

    ``probs`` may be ``n x K`` probabilities or integer predictions. Classes
    that never occur in ``labels`` report N/A (``None``) and are left out of
    the macro averages.
    """
    if n_classes < 2:
        raise MetricError("per-class metrics need K >= 2")
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs)
    if probs.ndim == 2:
        pred = np.argmax(probs, axis=1)
    else:
        pred, probs = probs.astype(np.int64), None
    names = list(names) if names is not None else [str(k) for k in range(n_classes)]
    n = labels.size
    rows = []
    for k in range(n_classes):
        actual, guess = labels == k, pred == k
        tp = int(np.sum(actual & guess))
        fp = int(np.sum(~actual & guess))
        fn = int(np.sum(actual & ~guess))
        tn = int(n - tp - fp - fn)
        row = {"class": names[k], "support": int(actual.sum()), "tp": tp, "fp": fp, "tn": tn, "fn": fn}
        if actual.sum() == 0:
            row.update(accuracy=NA, precision=NA, recall=NA, f1=NA, auc=NA, tpr=NA, tnr=NA, fpr=NA, fnr=NA)
        else:
            precision = _ratio(tp, tp + fp)
            recall = tp / (tp + fn)
            f1 = 0.0 if not precision or not recall else 2 * precision * recall / (precision + recall)
            class_auc = NA
            if probs is not None and (~actual).any():
                class_auc = auc(probs[actual, k], probs[~actual, k])
            row.update(accuracy=(tp + tn) / n, precision=precision, recall=recall, f1=f1, auc=class_auc,
                       tpr=recall, tnr=_ratio(tn, tn + fp), fpr=_ratio(fp, fp + tn), fnr=fn / (tp + fn))
        rows.append(row)
    present = [r for r in rows if r["support"] > 0]
    macro = lambda key: float(np.mean([r[key] or 0.0 for r in present])) if present else NA
    return {"classes": rows, "macro_f1": macro("f1"), "macro_recall": macro("recall"),
            "macro_precision": macro("precision"), "accuracy": float(np.mean(pred == labels)) if n else NA}


def roc_points(pos, neg) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) at every distinct score."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    out = []
    for th in np.unique(np.concatenate([pos, neg]))[::-1]:
        out.append((float(th), float(np.mean(neg >= th)), float(np.mean(pos >= th))))
    return out


def pr_points(pos, neg) -> list[tuple[float, float, float]]:
    """(threshold, recall, precision) at every distinct score."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    out = []
    for th in np.unique(np.concatenate([pos, neg]))[::-1]:
        tp, fp = int(np.sum(pos >= th)), int(np.sum(neg >= th))
        out.append((float(th), tp / pos.size, tp / (tp + fp)))
    return out


# ---------------------------------------------------------------- protocol


@dataclass
class EvalReport:
    mode: str
    status: str
    n_events: int
    auc: float | None = None
    ap: float | None = None
    mrr: float | None = None
    hits: dict = field(default_factory=dict)
    classes: dict = field(default_factory=dict)
    roc: list = field(default_factory=list)
    pr: list = field(default_factory=list)

    def records(self) -> list[dict]:
        base = {"schema_version": SCHEMA_VERSION, "mode": self.mode, "status": self.status, "n_events": self.n_events}
        if self.status != "ok":
            return [base]
        base.update(auc=self.auc, ap=self.ap, mrr=self.mrr, **{f"hits@{k}": v for k, v in self.hits.items()},
                    macro_f1=self.classes["macro_f1"], macro_recall=self.classes["macro_recall"],
                    category_accuracy=self.classes["accuracy"])
        out = [base]
        for row in self.classes["classes"]:
            out.append({"schema_version": SCHEMA_VERSION, "mode": self.mode, "section": "class", **row})
        return out


def replay_scores(engine: Engine, parts: Partitions, partition: str = "test", candidates: int | None = None) -> RunOutput:
    """Reset memory, replay the earlier partitions without gradients, then score ``partition``."""
    candidates = engine.cfg.candidates if candidates is None else candidates
    order = ["train", "val", "test"]
    saved_epoch = engine.epoch
    engine.epoch = EVAL_EPOCH
    engine.init_memory()
    try:
        for i, name in enumerate(order):
            stream = getattr(parts, name)
            if name == partition:
                return engine.run(stream, "eval", part=i, candidates=candidates)
            engine.run(stream, "eval", part=i)
    finally:
        engine.epoch = saved_epoch
    raise ValueError(f"unknown partition {partition!r}")


def report_from_scores(out: RunOutput, stream: EventStream, flags: np.ndarray, mode: str) -> EvalReport:
    if mode == "inductive":
        keep = flags
    elif mode == "transductive":
        keep = ~flags
    else:
        raise ValueError(f"mode must be transductive or inductive, got {mode!r}")
    n = int(keep.sum())
    if n == 0:
        return EvalReport(mode, "empty", 0)
    pos, neg = out.p_pos[keep], out.p_neg[keep]
    rep = EvalReport(mode, "ok", n, auc=auc(pos, neg), ap=average_precision(pos, neg))
    if out.rank_scores is not None:
        rs = out.rank_scores[keep]
        rep.mrr, rep.hits = mrr_hits(rs[:, 0], rs[:, 1:], ks=(1, 3))
    rep.classes = per_class_metrics(out.cat_probs[keep], stream.category[keep], len(stream.category_names),
                                    stream.category_names)
    rep.roc, rep.pr = roc_points(pos, neg), pr_points(pos, neg)
    return rep


def evaluate(engine: Engine, parts: Partitions, mode: str = "transductive", partition: str = "test") -> EvalReport:
    out = replay_scores(engine, parts, partition)
    stream = getattr(parts, partition)
    return report_from_scores(out, stream, parts.inductive_flags(stream), mode)


def evaluate_both(engine: Engine, parts: Partitions, partition: str = "test") -> dict[str, EvalReport]:
    out = replay_scores(engine, parts, partition)
    stream = getattr(parts, partition)
    flags = parts.inductive_flags(stream)
    return {m: report_from_scores(out, stream, flags, m) for m in ("transductive", "inductive")}


# ------------------------------------------------------------------- audits


class AuditInvalid(RuntimeError):
    """Raised when two identical runs disagree, which voids any audit verdict."""


@dataclass
class CausalityReport:
    probe_times: list[float]
    deltas: np.ndarray
    delta_max: float
    delta_mean: float
    pearson_r: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.delta_max <= self.tolerance

    def record(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "causality", "probes": len(self.probe_times),
                "compared": int(self.deltas.size), "delta_max": self.delta_max, "delta_mean": self.delta_mean,
                "pearson_r": self.pearson_r, "tolerance": self.tolerance, "passed": self.passed}


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2:
        return 1.0 if np.array_equal(a, b) else math.nan
    if np.array_equal(a, b):
        return 1.0
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return math.nan
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def _stream_outputs(make_engine, stream: EventStream) -> np.ndarray:
    eng = make_engine()
    out = eng.run(stream, "eval", part=0)
    return np.concatenate([out.p_pos, out.p_neg, out.cat_probs.reshape(-1)]), out


def causality_audit(make_engine, stream: EventStream, probes: int = 20, tolerance: float = 0.0,
                    probe_times=None) -> CausalityReport:
    """Past-only replay check.

    Run A scores the whole stream. For each probe time t (by default the
    middle event of evenly spaced batches) run B replays only the events with
    time <= t. The link probabilities of every event at or before t in the
    probe's batch must agree; any event after t is simply absent in run B.
    """
    _, run_a = _stream_outputs(make_engine, stream)
    _, run_a2 = _stream_outputs(make_engine, stream)
    if not (np.array_equal(run_a.p_pos, run_a2.p_pos) and np.array_equal(run_a.cat_probs, run_a2.cat_probs)):
        raise AuditInvalid("two identical full-stream runs produced different predictions")
    bs = make_engine().cfg.batch_size
    n_batches = math.ceil(len(stream) / bs)
    if probe_times is None:
        picks = np.unique(np.linspace(1, n_batches - 1, num=min(probes, max(n_batches - 1, 1))).astype(int))
        probe_times = []
        for b in picks:
            start, stop = b * bs, min((b + 1) * bs, len(stream))
            probe_times.append(float(stream.t[(start + stop - 1) // 2]))
    deltas, a_vals, b_vals = [], [], []
    for t_probe in probe_times:
        cut = int(np.searchsorted(stream.t, t_probe, side="right"))
        batch = (cut - 1) // bs
        lo = batch * bs
        eng = make_engine()
        out_b = eng.run(stream.subset(np.arange(cut)), "eval", part=0)
        pa = np.concatenate([run_a.p_pos[lo:cut], run_a.p_neg[lo:cut], run_a.cat_probs[lo:cut].reshape(-1)])
        pb = np.concatenate([out_b.p_pos[lo:cut], out_b.p_neg[lo:cut], out_b.cat_probs[lo:cut].reshape(-1)])
        deltas.append(np.abs(pa - pb))
        a_vals.append(pa)
        b_vals.append(pb)
    d = np.concatenate(deltas) if deltas else np.zeros(0)
    a, b = (np.concatenate(a_vals), np.concatenate(b_vals)) if deltas else (np.zeros(0), np.zeros(0))
    return CausalityReport(list(map(float, probe_times)), d, float(d.max(initial=0.0)),
                           float(d.mean()) if d.size else 0.0, _pearson(a, b), tolerance)


@dataclass
class OrderReport:
    runs: int
    variances: np.ndarray
    mean_variance: float
    max_variance: float
    frac_below: dict

    def record(self) -> dict:
        rec = {"schema_version": SCHEMA_VERSION, "kind": "order", "runs": self.runs, "edges": int(self.variances.size),
               "mean_variance": self.mean_variance, "max_variance": self.max_variance}
        rec.update({f"frac_below_{k:g}": v for k, v in self.frac_below.items()})
        return rec


def order_invariance_audit(cfg: Config, stream: EventStream, parts: Partitions, runs: int = 5, seed: int = 0,
                           epochs: int | None = None, shuffle: bool = True, partition: str = "test",
                           thresholds=(1e-2, 5e-2)) -> OrderReport:
    """Train ``runs`` models from the same initialization with independently
    shuffled batch orders and measure the per-edge variance of test predictions."""
    if runs < 2:
        raise ValueError("order audit needs at least two runs")
    from .numcore import Rng

    preds = []
    for r in range(runs):
        eng = Engine.for_stream(cfg, stream, parts.train)
        shuffle_rng = Rng(seed).derive(6, r) if shuffle else None
        train(eng, parts.train, parts.val, epochs=epochs, shuffle_rng=shuffle_rng)
        preds.append(replay_scores(eng, parts, partition, candidates=0).p_pos)
    P = np.stack(preds)
    var = P.var(axis=0, ddof=1) if P.shape[1] else np.zeros(0)
    return OrderReport(runs, var, float(var.mean()) if var.size else 0.0, float(var.max(initial=0.0)),
                       {th: float(np.mean(var < th)) if var.size else 1.0 for th in thresholds})
