from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alerttgn.events import (EventStream, IngestError, SplitSpec, SynthSpec, balance_classes, first_appearance,
                             inductive_mask, inter_arrivals, parse_csv, prepare_partitions, read_alerts,
                             sample_negatives, stream_stats, synth_stream, temporal_split, write_alerts)

FIXTURE = Path(__file__).parent / "fixtures" / "alerts_sample.csv"
HEADER = "detect_time,flow_count,source_ip,target_ip,port,protocol,category\n"


def make_stream(t, src=None, dst=None, category=None, n_att=3, n_vic=4, k=2):
    t = np.asarray(t, dtype=np.float64)
    n = len(t)
    src = np.arange(n) % n_att if src is None else np.asarray(src)
    dst = n_att + np.arange(n) % n_vic if dst is None else np.asarray(dst)
    category = np.arange(n) % k if category is None else np.asarray(category)
    return EventStream(src=src, dst=dst, t=t, features=np.zeros((n, 1)), category=category,
                       node_count=n_att + n_vic, category_names=[f"c{i}" for i in range(k)],
                       attacker_set=np.arange(n_att), victim_set=np.arange(n_att, n_att + n_vic))


def test_fixture_csv():
    s = parse_csv(FIXTURE)
    assert len(s) == 3
    assert np.unique(s.src).size == 2 and np.unique(s.dst).size == 2
    assert s.category_names == ["Recon scan", "Availability Dos", "Anomaly.Traffic"]
    assert np.all(np.diff(s.t) >= 0)
    assert np.intersect1d(s.src, s.dst).size == 0


def test_empty_csv(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text(HEADER)
    s = parse_csv(p)
    assert len(s) == 0 and s.node_count == 0


def test_equal_timestamps_keep_file_order(tmp_path):
    p = tmp_path / "ties.csv"
    rows = [f"2024-01-01T00:00:00Z,1,10.0.0.{i},10.1.0.1,80,TCP,c\n" for i in range(5)]
    p.write_text(HEADER + "".join(rows))
    s = parse_csv(p)
    assert [s.node_labels[a] for a in s.src] == [f"A:10.0.0.{i}" for i in range(5)]


def test_bad_rows_name_their_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(HEADER + "2024-01-01T00:00:00Z,1,a,b,80,TCP,c\nnot-a-time,1,a,b,80,TCP,c\n")
    with pytest.raises(IngestError) as err:
        read_alerts(p)
    assert err.value.line == 3
    p.write_text(HEADER + "2024-01-01T00:00:00Z,1,a,b,99999,TCP,c\n")
    with pytest.raises(IngestError, match="port"):
        read_alerts(p)
    p.write_text("a,b\n1,2\n")
    with pytest.raises(IngestError, match="missing columns"):
        read_alerts(p)


def test_csv_round_trip(tmp_path):
    recs = read_alerts(FIXTURE)
    out = tmp_path / "copy.csv"
    write_alerts(recs, out)
    assert read_alerts(out) == recs
    a, b = parse_csv(FIXTURE), parse_csv(out)
    assert np.array_equal(a.t, b.t) and np.array_equal(a.features, b.features)


def test_stream_binary_round_trip(tmp_path):
    s = synth_stream(SynthSpec(n_attackers=4, n_victims=6, horizon=3600), np.random.default_rng(0))
    s.save(tmp_path / "s.bin")
    r = EventStream.load(tmp_path / "s.bin")
    for name in ("src", "dst", "t", "features", "category", "attacker_set", "victim_set"):
        assert np.array_equal(getattr(s, name), getattr(r, name))


def test_balance_examples():
    rng = np.random.default_rng(0)
    cats = np.repeat([0, 1, 2], [10, 4, 2])
    s = make_stream(np.arange(16.0), category=rng.permutation(cats), k=3)
    b = balance_classes(s, rng)
    assert np.array_equal(np.bincount(b.category), [4, 4, 4])
    assert np.all(np.diff(b.t) >= 0)
    assert set(b.t.tolist()) <= set(s.t.tolist())
    even = make_stream(np.arange(6.0), category=[0, 1, 0, 1, 0, 1])
    assert np.array_equal(balance_classes(even, rng).t, even.t)
    single = make_stream(np.arange(5.0), category=np.zeros(5, dtype=int), k=1)
    assert balance_classes(single, rng) is single


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=60), st.integers(0, 1000))
def test_balance_keeps_time_and_categories(cats, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 100, len(cats)))
    s = make_stream(t, category=cats, k=4)
    b = balance_classes(s, rng)
    assert np.all(np.diff(b.t) >= 0)
    assert set(b.category.tolist()) <= set(cats)
    assert set(np.round(b.t, 12).tolist()) <= set(np.round(t, 12).tolist())


def test_split_one_to_hundred():
    s = make_stream(np.arange(1.0, 101.0))
    split, train, val, test = temporal_split(s)
    assert (split.t_validation, split.t_test) == (70.0, 85.0)
    assert (len(train), len(val), len(test)) == (70, 15, 15)


def test_split_all_equal():
    s = make_stream(np.full(9, 5.0))
    _, train, val, test = temporal_split(s)
    assert (len(train), len(val), len(test)) == (9, 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=80))
def test_split_is_a_sorted_partition(times):
    s = make_stream(sorted(float(x) for x in times))
    _, train, val, test = temporal_split(s)
    merged = np.concatenate([train.t, val.t, test.t])
    assert np.array_equal(merged, s.t)
    for part in (train, val, test):
        assert np.all(np.diff(part.t) >= 0)


def test_inductive_mask_target_fraction():
    # 20 nodes: 16 appear before the cutoff, 4 only after, 10% target -> 2 nodes
    src = [0, 1, 2, 3, 4, 5, 6, 7] * 2 + [8, 9]
    dst = [10, 11, 12, 13, 14, 15, 16, 17] * 2 + [18, 19]
    s = make_stream(np.arange(18.0), src=src, dst=dst, n_att=10, n_vic=10)
    split = SplitSpec(15.0, 16.5)
    split, train = inductive_mask(s, split, np.random.default_rng(0), 0.10)
    assert len(split.new_node_set) == 2
    assert split.new_node_set <= {8, 9, 18, 19}
    assert not train.touches(split.new_node_set).any()


def test_inductive_mask_empty_pool():
    s = make_stream(np.arange(10.0))
    split, train = inductive_mask(s, SplitSpec(100.0, 200.0), np.random.default_rng(0))
    assert split.new_node_set == frozenset() and len(train) == 10


@pytest.mark.parametrize("seed", range(5))
def test_prepare_partitions_no_training_event_touches_new_nodes(seed):
    s = synth_stream(SynthSpec(horizon=2 * 3600, late_fraction=0.2), np.random.default_rng(seed))
    parts = prepare_partitions(s, np.random.default_rng(seed + 100), 0.10)
    assert parts.split.new_node_set
    new = parts.split.new_node_set
    first = first_appearance(s)
    assert all(first[n] > parts.split.t_validation for n in new)
    for u, v in zip(parts.train.src.tolist(), parts.train.dst.tolist()):
        assert u not in new and v not in new
    assert parts.inductive_flags(parts.test).any()
    for part in (parts.train, parts.val, parts.test):
        assert np.all(np.diff(part.t) >= 0)


def test_negatives_two_victims():
    out = sample_negatives(np.full(1000, 5), np.array([5, 6]), np.random.default_rng(0))
    assert np.all(out == 6)


def test_negatives_uniform_and_exclusive():
    rng = np.random.default_rng(1)
    victims = np.arange(100, 200)
    dst = rng.choice(victims, size=100_000)
    out = sample_negatives(dst, victims, rng)
    assert not np.any(out == dst)
    counts = np.bincount(out - 100, minlength=100)
    p = 1 / 100
    sigma = math.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) < 3.5 * sigma)


def test_negatives_prefix_stable():
    victims = np.arange(10, 20)
    dst = np.arange(10, 18)
    full = sample_negatives(dst, victims, np.random.default_rng(2), size=8)
    prefix = sample_negatives(dst[:3], victims, np.random.default_rng(2), size=8)
    assert np.array_equal(full[:3], prefix)


def test_synth_zero_jitter_single_spike():
    s = synth_stream(SynthSpec(n_attackers=3, n_victims=6, jitter=0.0, horizon=3600), np.random.default_rng(0))
    gaps = inter_arrivals(s, "pair")
    assert np.max(np.abs(gaps - 150.0)) < 1e-6
    hist = [r for r in stream_stats(s) if r["record"] == "interarrival" and r["scope"] == "pair"]
    assert len(hist) == 1


def test_synth_histogram_mode_near_period():
    s = synth_stream(SynthSpec(), np.random.default_rng(1))
    gaps = inter_arrivals(s, "pair")
    counts, edges = np.histogram(gaps, bins=np.arange(0, 400, 10))
    mode = edges[np.argmax(counts)]
    assert 120 <= mode <= 180


def test_synth_pair_category_constant_and_bipartite():
    s = synth_stream(SynthSpec(categories=2), np.random.default_rng(2))
    seen = {}
    for u, v, c in zip(s.src.tolist(), s.dst.tolist(), s.category.tolist()):
        assert seen.setdefault((u, v), c) == c
    assert np.all(np.isin(s.src, s.attacker_set)) and np.all(np.isin(s.dst, s.victim_set))


def _late_and_early_targets(late_targets):
    spec = SynthSpec(late_fraction=0.25, late_targets=late_targets, horizon=2 * 3600)
    s = synth_stream(spec, np.random.default_rng(3))
    late = s.src >= spec.n_attackers - 10
    return set(s.dst[late].tolist()), set(s.dst[~late].tolist())


def test_synth_late_targets_option():
    late, early = _late_and_early_targets("new")
    assert not late & early
    late, early = _late_and_early_targets("existing")
    assert late & early
    with pytest.raises(ValueError):
        synth_stream(SynthSpec(late_targets="other"), np.random.default_rng(0))


def test_inter_arrivals_and_stats():
    s = make_stream([0.0, 60.0])
    assert np.array_equal(inter_arrivals(s), [60.0])
    s = synth_stream(SynthSpec(horizon=3600), np.random.default_rng(4))
    recs = stream_stats(s)
    cum = [r["count"] for r in recs if r["record"] == "cumulative"]
    assert np.all(np.diff(cum) >= 0) and cum[-1] == len(s)
    summary = recs[0]
    assert summary["record"] == "summary" and summary["events"] == len(s)
    cats = {r["name"]: r["count"] for r in recs if r["record"] == "category"}
    assert sum(cats.values()) == len(s)
