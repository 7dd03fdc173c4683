"""Alert event streams: CSV ingestion, bipartite node interning, resampling,
chronological splits, inductive node masking, negative sampling, a synthetic
periodic-attack generator and descriptive statistics."""
from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import container

PROTOCOLS = ("TCP", "UDP", "other")
PORT_BUCKETS = ("well-known", "registered", "dynamic")
FEATURE_NAMES = tuple(f"proto_{p}" for p in PROTOCOLS) + tuple(f"port_{b}" for b in PORT_BUCKETS) + ("log_flow",)
FEATURE_WIDTH = len(FEATURE_NAMES)
# log1p(flow_count) is divided by this so a million flows maps to 1.0
FLOW_LOG_SCALE = math.log1p(1e6)


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class AlertRecord:
    detect_time: str
    flow_count: int
    source_ip: str
    target_ip: str
    port: int
    protocol: str
    category: str

    def timestamp(self) -> datetime:
        return parse_timestamp(self.detect_time)


@dataclass(frozen=True)
class TemporalEvent:
    src: int
    dst: int
    t: float
    edge_features: np.ndarray
    category: int


@dataclass
class EventStream:
    """Columnar, chronologically sorted event store.

    Attackers and victims occupy disjoint id ranges; ``attacker_set`` and
    ``victim_set`` describe the entity universe and are kept when events are
    dropped, so later filtering never renumbers nodes.
    """

    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    features: np.ndarray
    category: np.ndarray
    node_count: int
    category_names: list[str]
    attacker_set: np.ndarray
    victim_set: np.ndarray
    node_labels: list[str] = field(default_factory=list)
    epoch: str = ""

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.category = np.asarray(self.category, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats if feats.ndim == 2 else feats.reshape(len(self.t), -1)
        self.attacker_set = np.unique(np.asarray(self.attacker_set, dtype=np.int64))
        self.victim_set = np.unique(np.asarray(self.victim_set, dtype=np.int64))
        n = len(self.t)
        if not (len(self.src) == len(self.dst) == len(self.category) == n):
            raise ValueError("column lengths differ")
        if n and np.any(np.diff(self.t) < 0):
            raise ValueError("events must be sorted by time")
        if n and np.any(self.t < 0):
            raise ValueError("negative timestamps")
        if np.intersect1d(self.attacker_set, self.victim_set).size:
            raise ValueError("attacker and victim sets overlap")
        if n and (np.any(self.src == self.dst)):
            raise ValueError("self-loop event")
        if n and self.category.max() >= len(self.category_names):
            raise ValueError("category index out of range")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def event(self, i: int) -> TemporalEvent:
        return TemporalEvent(int(self.src[i]), int(self.dst[i]), float(self.t[i]), self.features[i], int(self.category[i]))

    def events(self) -> Iterator[TemporalEvent]:
        for i in range(len(self)):
            yield self.event(i)

    def subset(self, idx) -> EventStream:
        """Events selected by a boolean mask or sorted index array; node universe unchanged."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return replace(
            self,
            src=self.src[idx], dst=self.dst[idx], t=self.t[idx],
            features=self.features[idx], category=self.category[idx],
        )

    def nodes(self) -> np.ndarray:
        return np.union1d(self.src, self.dst)

    def touches(self, nodes) -> np.ndarray:
        nodes = np.asarray(sorted(nodes), dtype=np.int64)
        return np.isin(self.src, nodes) | np.isin(self.dst, nodes)

    # --- canonical binary form -------------------------------------------
    def save(self, path) -> None:
        meta = {
            "schema": "event-stream/1",
            "node_count": int(self.node_count),
            "category_names": list(self.category_names),
            "node_labels": list(self.node_labels),
            "epoch": self.epoch,
        }
        container.save(path, "stream", meta, {
            "src": self.src, "dst": self.dst, "t": self.t, "features": self.features,
            "category": self.category, "attacker_set": self.attacker_set, "victim_set": self.victim_set,
        })

    @classmethod
    def load(cls, path) -> EventStream:
        meta, a = container.load(path, "stream")
        return cls(
            src=a["src"], dst=a["dst"], t=a["t"], features=a["features"], category=a["category"],
            node_count=meta["node_count"], category_names=meta["category_names"],
            attacker_set=a["attacker_set"], victim_set=a["victim_set"],
            node_labels=meta["node_labels"], epoch=meta["epoch"],
        )


def concat_streams(parts: Sequence[EventStream]) -> EventStream:
    base = parts[0]
    return replace(
        base,
        src=np.concatenate([p.src for p in parts]),
        dst=np.concatenate([p.dst for p in parts]),
        t=np.concatenate([p.t for p in parts]),
        features=np.concatenate([p.features for p in parts]),
        category=np.concatenate([p.category for p in parts]),
    )


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class SchemaConfig:
    """Maps AlertRecord fields to CSV column names."""

    detect_time: str = "detect_time"
    flow_count: str = "flow_count"
    source_ip: str = "source_ip"
    target_ip: str = "target_ip"
    port: str = "port"
    protocol: str = "protocol"
    category: str = "category"

    def columns(self) -> dict[str, str]:
        return dict(self.__dict__)


def parse_timestamp(text: str) -> datetime:
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no UTC offset")
    return ts


def read_alerts(path, schema: SchemaConfig | None = None) -> list[AlertRecord]:
    schema = schema or SchemaConfig()
    cols = schema.columns()
    records: list[AlertRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError("missing header row", 1)
        missing = [c for c in cols.values() if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"missing columns {missing}", 1)
        for row in reader:
            line = reader.line_num
            try:
                rec = AlertRecord(
                    detect_time=row[cols["detect_time"]].strip(),
                    flow_count=int(row[cols["flow_count"]]),
                    source_ip=row[cols["source_ip"]].strip(),
                    target_ip=row[cols["target_ip"]].strip(),
                    port=int(row[cols["port"]]),
                    protocol=row[cols["protocol"]].strip(),
                    category=row[cols["category"]].strip(),
                )
                rec.timestamp()
            except (ValueError, TypeError, AttributeError) as exc:
                raise IngestError(str(exc), line) from None
            if not 0 <= rec.port <= 65535:
                raise IngestError(f"port {rec.port} out of range", line)
            if rec.flow_count < 0:
                raise IngestError(f"negative flow count {rec.flow_count}", line)
            records.append(rec)
    return records


def write_alerts(records: Sequence[AlertRecord], path, schema: SchemaConfig | None = None) -> None:
    cols = (schema or SchemaConfig()).columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(cols.values()))
        for r in records:
            writer.writerow([r.detect_time, r.flow_count, r.source_ip, r.target_ip, r.port, r.protocol, r.category])


def port_bucket(port: int) -> int:
    if port < 1024:
        return 0
    if port < 49152:
        return 1
    return 2


def encode_features(protocol: str, port: int, flow_count: int) -> np.ndarray:
    x = np.zeros(FEATURE_WIDTH)
    proto = protocol.upper()
    x[PROTOCOLS.index(proto) if proto in PROTOCOLS[:2] else 2] = 1.0
    x[3 + port_bucket(port)] = 1.0
    x[6] = math.log1p(flow_count) / FLOW_LOG_SCALE
    return x


def build_stream(records: Sequence[AlertRecord]) -> EventStream:
    """Intern IPs per role (attackers first) and convert to relative seconds."""
    if not records:
        return EventStream(
            src=[], dst=[], t=[], features=np.zeros((0, FEATURE_WIDTH)), category=[], node_count=0,
            category_names=[], attacker_set=[], victim_set=[],
        )
    stamps = [r.timestamp() for r in records]
    t0 = min(stamps)
    times = np.array([(s - t0).total_seconds() for s in stamps])
    order = np.argsort(times, kind="stable")
    attackers: dict[str, int] = {}
    victims: dict[str, int] = {}
    categories: dict[str, int] = {}
    for i in order:
        r = records[i]
        attackers.setdefault(r.source_ip, len(attackers))
        victims.setdefault(r.target_ip, len(victims))
        categories.setdefault(r.category, len(categories))
    n_att = len(attackers)
    src = np.array([attackers[records[i].source_ip] for i in order])
    dst = np.array([n_att + victims[records[i].target_ip] for i in order])
    feats = np.stack([encode_features(records[i].protocol, records[i].port, records[i].flow_count) for i in order])
    cats = np.array([categories[records[i].category] for i in order])
    labels = [f"A:{ip}" for ip in attackers] + [f"V:{ip}" for ip in victims]
    return EventStream(
        src=src, dst=dst, t=times[order], features=feats, category=cats,
        node_count=n_att + len(victims), category_names=list(categories),
        attacker_set=np.arange(n_att), victim_set=np.arange(n_att, n_att + len(victims)),
        node_labels=labels, epoch=t0.isoformat(),
    )


def parse_csv(path, schema: SchemaConfig | None = None) -> EventStream:
    return build_stream(read_alerts(path, schema))


# ---------------------------------------------------------------------------
# resampling, splitting, masking


def balance_classes(stream: EventStream, rng: np.random.Generator) -> EventStream:
    """Resample every category to the median class size (floored).

    Larger classes are subsampled without replacement; smaller ones keep all
    their events plus duplicates drawn with replacement. Duplicates carry their
    original timestamps and the result is stably re-sorted by time.
    """
    present = np.unique(stream.category)
    if present.size <= 1:
        return stream
    sizes = {int(c): int(np.sum(stream.category == c)) for c in present}
    target = int(math.floor(float(np.median(list(sizes.values())))))
    keep: list[np.ndarray] = []
    for c in present:
        idx = np.flatnonzero(stream.category == c)
        n = idx.size
        if n > target:
            keep.append(np.sort(rng.choice(idx, size=target, replace=False)))
        elif n < target:
            keep.append(np.sort(np.concatenate([idx, rng.choice(idx, size=target - n, replace=True)])))
        else:
            keep.append(idx)
    merged = np.concatenate(keep)
    # original index breaks ties, so duplicates stay adjacent and order is stable
    order = np.lexsort((merged, stream.t[merged]))
    return stream.subset(merged[order])


def nearest_rank(values: np.ndarray, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


@dataclass
class SplitSpec:
    t_validation: float
    t_test: float
    new_node_set: frozenset[int] = frozenset()


def temporal_split(stream: EventStream, val_pct: float = 70.0, test_pct: float = 85.0):
    """Nearest-rank quantile cutoffs; returns ``(split, train, val, test)``."""
    if len(stream) == 0:
        raise ValueError("cannot split an empty stream")
    t_val = nearest_rank(stream.t, val_pct)
    t_test = nearest_rank(stream.t, test_pct)
    train = stream.subset(stream.t <= t_val)
    val = stream.subset((stream.t > t_val) & (stream.t <= t_test))
    test = stream.subset(stream.t > t_test)
    return SplitSpec(t_val, t_test), train, val, test


def first_appearance(stream: EventStream) -> dict[int, float]:
    first: dict[int, float] = {}
    for col in (stream.src, stream.dst):
        for node, t in zip(col.tolist(), stream.t.tolist()):
            if node not in first or t < first[node]:
                first[node] = t
    return first


def inductive_mask(stream: EventStream, split: SplitSpec, rng: np.random.Generator, fraction: float = 0.10,
                   train: EventStream | None = None):
    """Pick the unseen-node set and drop training events touching it.

    The pool is restricted to nodes whose first event is after the validation
    cutoff; from it ``round(fraction * |nodes|)`` nodes are drawn uniformly
    (the whole pool when it is smaller). Returns ``(split, train)``.
    """
    first = first_appearance(stream)
    total = len(first)
    pool = sorted(n for n, t in first.items() if t > split.t_validation)
    k = min(len(pool), int(math.floor(fraction * total + 0.5)))
    chosen = frozenset(int(x) for x in rng.choice(np.array(pool, dtype=np.int64), size=k, replace=False)) if k else frozenset()
    if train is None:
        train = stream.subset(stream.t <= split.t_validation)
    if chosen:
        train = train.subset(~train.touches(chosen))
    return replace(split, new_node_set=chosen), train


@dataclass
class Partitions:
    split: SplitSpec
    train: EventStream
    val: EventStream
    test: EventStream

    @property
    def full(self) -> EventStream:
        return concat_streams([self.train, self.val, self.test])

    def inductive_flags(self, part: EventStream) -> np.ndarray:
        if not self.split.new_node_set:
            return np.zeros(len(part), dtype=bool)
        return part.touches(self.split.new_node_set)


def prepare_partitions(stream: EventStream, rng: np.random.Generator, new_node_fraction: float = 0.10,
                       balance: bool = False) -> Partitions:
    if balance:
        stream = balance_classes(stream, rng)
    split, train, val, test = temporal_split(stream)
    split, train = inductive_mask(stream, split, rng, new_node_fraction, train=train)
    return Partitions(split, train, val, test)


# ---------------------------------------------------------------------------
# negatives


def sample_negative(positive: TemporalEvent, stream: EventStream, rng: np.random.Generator) -> int:
    return int(sample_negatives(np.array([positive.dst]), stream.victim_set, rng)[0])


def sample_negatives(dst: np.ndarray, victims: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform victims excluding each positive destination.

    ``size`` fixes how many draws are consumed from ``rng`` (only the first
    ``len(dst)`` are returned), so a prefix of a batch gets the same negatives
    as the full batch.
    """
    victims = np.asarray(victims, dtype=np.int64)
    if victims.size < 2:
        raise ValueError("negative sampling needs at least two victims")
    n = len(dst)
    draws = rng.integers(0, victims.size - 1, size=max(n, size or 0))[:n]
    pos = np.searchsorted(victims, dst)
    # positive not in the universe -> searchsorted position is never hit exactly
    hit = (pos < victims.size) & (victims[np.minimum(pos, victims.size - 1)] == dst)
    draws = np.where(hit & (draws >= pos), draws + 1, draws)
    return victims[draws]


# ---------------------------------------------------------------------------
# synthetic periodic attack streams


@dataclass
class SynthSpec:
    n_attackers: int = 40
    n_victims: int = 60
    horizon: float = 4 * 3600.0
    period: float = 150.0
    jitter: float = 30.0
    categories: int | Sequence[str] = 4
    targets_per_attacker: int = 3
    # fraction of attackers (with their own victims) that only start late in the stream
    late_fraction: float = 0.0
    late_window: tuple[float, float] = (0.72, 0.9)
    # "new": late attackers hit their own late victims; "existing": they hit the early victim pool
    late_targets: str = "new"
    # per-attacker period multiplier drawn log-uniformly from [1/spread, spread]; 1 keeps one shared period
    period_spread: float = 1.0
    # mean active / idle campaign durations in periods; idle 0 disables bursts
    burst_on: float = 30.0
    burst_off: float = 0.0
    feature_noise: float = 0.1


CATEGORY_PROFILES = [
    # protocol index, port bucket, mean log flow
    (0, 0, 0.65),
    (1, 1, 0.35),
    (0, 2, 0.15),
    (2, 0, 0.50),
    (1, 0, 0.80),
    (2, 2, 0.25),
]


def synth_stream(spec: SynthSpec, rng: np.random.Generator) -> EventStream:
    """Attacker/victim pairs firing every ``period`` +- ``jitter`` seconds.

    Each attacker has one category and a fixed set of targets drawn from the
    victim group of that category; every event on a pair therefore has the
    same category. Edge features follow a per-category protocol/port/flow
    profile with ``feature_noise`` corruption.
    """
    if spec.period <= 0:
        raise ValueError("period must be positive")
    names = list(spec.categories) if not isinstance(spec.categories, int) else [f"cat{k}" for k in range(spec.categories)]
    k_cat = len(names)
    n_late = int(round(spec.late_fraction * spec.n_attackers))
    n_early = spec.n_attackers - n_late
    att_cat = np.arange(spec.n_attackers) % k_cat
    # victims split into an early and a late pool, each grouped by category
    if spec.late_targets not in ("new", "existing"):
        raise ValueError(f"late_targets must be 'new' or 'existing', got {spec.late_targets!r}")
    n_late_v = int(round(spec.late_fraction * spec.n_victims)) if spec.late_targets == "new" else 0
    victim_ids = spec.n_attackers + np.arange(spec.n_victims)
    early_v, late_v = victim_ids[:spec.n_victims - n_late_v], victim_ids[spec.n_victims - n_late_v:]

    def groups(pool):
        return [pool[c::k_cat] if pool[c::k_cat].size else pool for c in range(k_cat)]

    early_groups, late_groups = groups(early_v), groups(late_v) if late_v.size else None
    rows = []
    for a in range(spec.n_attackers):
        late = a >= n_early
        group = (late_groups if late and late_groups is not None else early_groups)[att_cat[a]]
        k = min(spec.targets_per_attacker, group.size)
        targets = rng.choice(group, size=k, replace=False)
        start = rng.uniform(*spec.late_window) * spec.horizon if late else 0.0
        active = _active_intervals(spec, rng, start)
        period = spec.period
        if spec.period_spread > 1.0:
            period *= math.exp(rng.uniform(-1.0, 1.0) * math.log(spec.period_spread))
        for v in targets:
            t = start + rng.uniform(0, period)
            while t < spec.horizon:
                if any(lo <= t < hi for lo, hi in active):
                    fire = t + (rng.uniform(-spec.jitter, spec.jitter) if spec.jitter > 0 else 0.0)
                    if 0 <= fire < spec.horizon:
                        rows.append((fire, a, int(v), int(att_cat[a])))
                t += period
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    n = len(rows)
    feats = np.zeros((n, FEATURE_WIDTH))
    for i, (_, _, _, c) in enumerate(rows):
        proto, bucket, flow = CATEGORY_PROFILES[c % len(CATEGORY_PROFILES)]
        if rng.random() < spec.feature_noise:
            proto = int(rng.integers(3))
        if rng.random() < spec.feature_noise:
            bucket = int(rng.integers(3))
        feats[i, proto] = 1.0
        feats[i, 3 + bucket] = 1.0
        feats[i, 6] = float(np.clip(flow + 0.05 * rng.standard_normal(), 0.0, 1.0))
    t = np.array([r[0] for r in rows])
    t0 = t.min() if n else 0.0
    return EventStream(
        src=[r[1] for r in rows], dst=[r[2] for r in rows], t=np.round(t - t0, 6), features=feats,
        category=[r[3] for r in rows], node_count=spec.n_attackers + spec.n_victims, category_names=names,
        attacker_set=np.arange(spec.n_attackers), victim_set=victim_ids,
    )


def _active_intervals(spec: SynthSpec, rng: np.random.Generator, start: float) -> list[tuple[float, float]]:
    if spec.burst_off <= 0:
        return [(start, math.inf)]
    out = []
    t = start
    while t < spec.horizon:
        on = rng.exponential(spec.burst_on * spec.period)
        out.append((t, t + on))
        t += on + rng.exponential(spec.burst_off * spec.period)
    return out


# ---------------------------------------------------------------------------
# statistics


def _histogram(values: np.ndarray, width: float) -> list[tuple[float, float, int]]:
    if values.size == 0:
        return []
    v = np.round(values, 6)
    bins = np.floor(v / width).astype(np.int64)
    counts = Counter(bins.tolist())
    return [(b * width, (b + 1) * width, counts[b]) for b in sorted(counts)]


def inter_arrivals(stream: EventStream, scope: str = "global") -> np.ndarray:
    """Gaps between consecutive events: over the whole stream, per source, or per (src, dst) pair."""
    if scope == "global":
        return np.diff(stream.t)
    keys = stream.src if scope == "source" else stream.src * (stream.node_count + 1) + stream.dst
    gaps = []
    by_key: dict[int, list[float]] = defaultdict(list)
    for k, t in zip(keys.tolist(), stream.t.tolist()):
        by_key[k].append(t)
    for k in sorted(by_key):
        gaps.extend(np.diff(by_key[k]).tolist())
    return np.array(gaps)


def stream_stats(stream: EventStream, bin_width: float = 30.0, cumulative_points: int = 50) -> list[dict]:
    """Structured report records: summary, inter-arrival histograms, cumulative counts, class counts."""
    recs: list[dict] = [{
        "record": "summary", "events": len(stream), "nodes": int(stream.nodes().size),
        "attackers": int(np.unique(stream.src).size), "victims": int(np.unique(stream.dst).size),
        "categories": len(stream.category_names),
        "span_s": float(stream.t[-1] - stream.t[0]) if len(stream) else 0.0,
    }]
    for scope in ("global", "source", "pair"):
        for lo, hi, count in _histogram(inter_arrivals(stream, scope), bin_width):
            recs.append({"record": "interarrival", "scope": scope, "bin_lo": lo, "bin_hi": hi, "count": count})
    if len(stream):
        grid = np.linspace(stream.t[0], stream.t[-1], cumulative_points)
        cum = np.searchsorted(stream.t, grid, side="right")
        for g, c in zip(grid, cum):
            recs.append({"record": "cumulative", "t": float(g), "count": int(c)})
    counts = np.bincount(stream.category, minlength=len(stream.category_names))
    for name, c in zip(stream.category_names, counts):
        recs.append({"record": "category", "name": name, "count": int(c)})
    return recs
