"""Streaming memory engine: raw message store, node memory, batched replay,
training loop and checkpoints.

Per batch the order is fixed: flush the store (messages from earlier batches
update memory), embed and predict, compute the loss and step, and only then
store this batch's raw messages. Predictions therefore never see their own
batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import numcore as F
from .aggregators import MessageBatch, make_aggregator
from .config import Config
from .encoders import Affine, GruCell, MessageFunction, Module, TimeEncoder
from .events import EventStream, sample_negatives
from .heads import CategoryHead, FocalLossCfg, LinkHead, bce_loss, class_weights, focal_loss, joint_loss
from .numcore import Tape, Tensor

CHECKPOINT_KIND = "checkpoint"
FORMAT = "alerttgn-checkpoint/1"

# rng derivation tags
_TRAIN, _EVAL, _RANK, _DROP, _INIT, _ORDER = 1, 2, 3, 4, 5, 6


class CausalityError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Model(Module):
    def __init__(self, cfg: Config, d_feat: int, n_classes: int, rng: np.random.Generator):
        d_edge = d_feat + (n_classes if cfg.category_in_message else 0)
        self.msg_time = TimeEncoder(cfg.d_time)
        self.message = MessageFunction(cfg.d_mem, d_edge, cfg.d_time, cfg.d_msg, rng)
        self.aggregator = make_aggregator(cfg.aggregator, cfg.d_msg, rng, cfg.hidden, cfg.heads, cfg.dropout,
                                          cfg.layers, cfg.attention_scope)
        self.updater = GruCell(cfg.d_msg, cfg.d_mem, rng)
        self.embed_time = TimeEncoder(cfg.d_time)
        self.embed = Affine(cfg.d_mem + cfg.d_time, cfg.d_node, rng)
        self.link = LinkHead(cfg.d_node, rng)
        self.category = CategoryHead(cfg.d_node, n_classes, rng)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float = 0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        scale = 1.0
        if self.clip_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif scale != 1.0:
                g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class RecordTable:
    """Append-only table of stored interactions with the memory snapshot taken at store time."""

    _FIELDS = ("src", "dst", "t", "edge", "mem_src", "mem_dst", "dt_src", "dt_dst")

    def __init__(self, d_edge: int, d_mem: int, capacity: int = 256):
        self.n = 0
        self.src = np.zeros(capacity, dtype=np.int64)
        self.dst = np.zeros(capacity, dtype=np.int64)
        self.t = np.zeros(capacity)
        self.edge = np.zeros((capacity, d_edge))
        self.mem_src = np.zeros((capacity, d_mem))
        self.mem_dst = np.zeros((capacity, d_mem))
        self.dt_src = np.zeros(capacity)
        self.dt_dst = np.zeros(capacity)

    def _grow(self, need: int) -> None:
        cap = len(self.t)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in self._FIELDS:
            old = getattr(self, name)
            arr = np.zeros((new_cap, *old.shape[1:]), dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)

    def append(self, **cols) -> np.ndarray:
        k = len(cols["t"])
        self._grow(self.n + k)
        sl = slice(self.n, self.n + k)
        for name in self._FIELDS:
            getattr(self, name)[sl] = cols[name]
        self.n += k
        return np.arange(sl.start, sl.stop)

    def truncate(self, n: int) -> None:
        self.n = n

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"rec.{name}": getattr(self, name)[:self.n].copy() for name in self._FIELDS}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        n = len(arrays["rec.t"])
        self._grow(n)
        for name in self._FIELDS:
            getattr(self, name)[:n] = arrays[f"rec.{name}"]
        self.n = n


@dataclass
class StepOutput:
    n: int
    p_pos: np.ndarray
    p_neg: np.ndarray
    cat_probs: np.ndarray
    loss: float
    rank_scores: np.ndarray | None = None


@dataclass
class RunOutput:
    p_pos: np.ndarray
    p_neg: np.ndarray
    cat_probs: np.ndarray
    rank_scores: np.ndarray | None
    losses: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else math.nan


def _flatten_hist(hist: dict, key_width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    keys = sorted(hist)
    k = np.array(keys, dtype=np.int64).reshape(len(keys), key_width)
    lens = np.array([len(hist[x]) for x in keys], dtype=np.int64)
    vals = np.array([r for x in keys for r in hist[x]], dtype=np.int64)
    return k, lens, vals


def _unflatten_hist(k: np.ndarray, lens: np.ndarray, vals: np.ndarray, scalar: bool) -> dict:
    out, pos = {}, 0
    for key, n in zip(k, lens):
        out[int(key[0]) if scalar else (int(key[0]), int(key[1]))] = tuple(int(v) for v in vals[pos:pos + n])
        pos += n
    return out


class Engine:
    """Model parameters plus the evolving stream state (memory, store, histories)."""

    def __init__(self, cfg: Config, n_nodes: int, d_feat: int, n_classes: int, victims: np.ndarray,
                 alpha: np.ndarray | None = None, leaky_flush: bool = False):
        self.cfg = cfg
        self.n_nodes, self.d_feat, self.n_classes = n_nodes, d_feat, n_classes
        self.victims = np.asarray(victims, dtype=np.int64)
        self.seeds = F.Rng(cfg.seed)
        self.model = Model(cfg, d_feat, n_classes, self.seeds.derive(_INIT))
        self.params = self.model.parameters()
        self.optimizer = Adam(self.params, cfg.lr, clip_norm=cfg.clip_norm)
        self.focal = FocalLossCfg(np.ones(n_classes) if alpha is None else alpha, cfg.gamma)
        # test-only mutation: flush the current batch into memory before predicting
        self.leaky_flush = leaky_flush
        self.d_edge = d_feat + (n_classes if cfg.category_in_message else 0)
        self.step = 0
        self.epoch = 0
        self.init_memory()

    @classmethod
    def for_stream(cls, cfg: Config, stream: EventStream, train: EventStream | None = None, **kw) -> Engine:
        ref = train if train is not None and len(train) else stream
        alpha = class_weights(ref.category, len(stream.category_names)) if len(ref) else None
        return cls(cfg, stream.node_count, stream.feature_width, len(stream.category_names), stream.victim_set,
                   alpha=alpha, **kw)

    # ------------------------------------------------------------------ state

    def init_memory(self, epoch_time: float = 0.0) -> None:
        self.memory = np.zeros((self.n_nodes, self.cfg.d_mem))
        self.last_update = np.full(self.n_nodes, float(epoch_time))
        self.slots = np.full(self.n_nodes, -1, dtype=np.int64)
        self.records = RecordTable(self.d_edge, self.cfg.d_mem)
        self.node_hist: dict[int, tuple[int, ...]] = {}
        self.pair_hist: dict[tuple[int, int], tuple[int, ...]] = {}
        self.clock = -math.inf

    def snapshot(self) -> tuple:
        return (self.memory.copy(), self.last_update.copy(), self.slots.copy(), self.records.n,
                dict(self.node_hist), dict(self.pair_hist), self.clock)

    def restore_snapshot(self, snap: tuple) -> None:
        mem, lu, slots, n, nh, ph, clock = snap
        self.memory, self.last_update, self.slots = mem.copy(), lu.copy(), slots.copy()
        self.records.truncate(n)
        self.node_hist, self.pair_hist, self.clock = dict(nh), dict(ph), clock

    # ------------------------------------------------------------- components

    def _time_input(self, dt: np.ndarray, t: np.ndarray) -> np.ndarray:
        return t if self.cfg.time_input == "absolute" else dt

    def _edge_features(self, features: np.ndarray, category: np.ndarray) -> np.ndarray:
        if not self.cfg.category_in_message:
            return features
        return np.concatenate([features, np.eye(self.n_classes)[category]], axis=1)

    def _message_batch(self, nodes: np.ndarray, recs: np.ndarray) -> MessageBatch:
        R = self.records
        edge_scope = self.cfg.aggregator == "bita" and self.cfg.bita_scope == "edge"
        if edge_scope:
            keys = list(dict.fromkeys((int(R.src[r]), int(R.dst[r])) for r in np.unique(recs)))
            seqs = [self.pair_hist[k] for k in keys]
            rows = np.array([r for s in seqs for r in s], dtype=np.int64)
            self_src = np.ones(len(rows), dtype=bool)
            seq_nodes = np.array(keys, dtype=np.int64).reshape(-1, 2)
            row_of = {int(u): i for i, u in enumerate(nodes)}
            incidence = np.array([(row_of[a], s) for s, (a, b) in enumerate(keys)]
                                 + [(row_of[b], s) for s, (a, b) in enumerate(keys)], dtype=np.int64)
        else:
            seqs = [self.node_hist[int(u)] for u in nodes]
            rows = np.array([r for s in seqs for r in s], dtype=np.int64)
            owner = np.repeat(nodes, [len(s) for s in seqs])
            self_src = R.src[rows] == owner
            seq_nodes = np.stack([nodes, nodes], axis=1)
            incidence = None
        mem_self = np.where(self_src[:, None], R.mem_src[rows], R.mem_dst[rows])
        mem_other = np.where(self_src[:, None], R.mem_dst[rows], R.mem_src[rows])
        dt = np.where(self_src, R.dt_src[rows], R.dt_dst[rows])
        tin = self._time_input(dt, R.t[rows])
        m = self.model
        msgs = m.message(F.constant(mem_self), F.constant(mem_other), F.constant(R.edge[rows]), m.msg_time(tin))
        return MessageBatch(messages=msgs, t=R.t[rows], dt=tin, seq=np.repeat(np.arange(len(seqs)), [len(s) for s in seqs]),
                            n_seq=len(seqs), nodes=nodes, seq_nodes=seq_nodes, incidence=incidence)

    def flush(self, training: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor | None, np.ndarray]:
        """Turn stored raw messages into memory updates; returns (new memory rows, nodes)."""
        nodes = np.flatnonzero(self.slots >= 0)
        if nodes.size == 0:
            return None, nodes
        recs = self.slots[nodes]
        W = self.cfg.window
        for u, r in zip(nodes.tolist(), recs.tolist()):
            self.node_hist[u] = (self.node_hist.get(u, ()) + (r,))[-W:]
        for r in np.unique(recs).tolist():
            key = (int(self.records.src[r]), int(self.records.dst[r]))
            self.pair_hist[key] = (self.pair_hist.get(key, ()) + (r,))[-W:]
        batch = self._message_batch(nodes, recs)
        agg = self.model.aggregator(batch, training, rng)
        new = self.model.updater(agg, F.constant(self.memory[nodes]))
        self.slots[nodes] = -1
        self.last_update[nodes] = np.maximum(self.last_update[nodes], self.records.t[recs])
        return new, nodes

    def store(self, src, dst, t, features, category) -> None:
        src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)
        ids = self.records.append(
            src=src, dst=dst, t=t, edge=self._edge_features(features, category),
            mem_src=self.memory[src], mem_dst=self.memory[dst],
            dt_src=t - self.last_update[src], dt_dst=t - self.last_update[dst],
        )
        # chronological assignment: the latest event touching a node wins its slot
        last: dict[int, int] = {}
        for i, (a, b) in enumerate(zip(src.tolist(), dst.tolist())):
            last[a] = i
            last[b] = i
        nodes = np.fromiter(last.keys(), dtype=np.int64, count=len(last))
        self.slots[nodes] = ids[np.fromiter(last.values(), dtype=np.int64, count=len(last))]
        assert np.all(self.slots < self.records.n)

    def compute_embedding(self, nodes, t, mem_table: Tensor | None = None, row_of: np.ndarray | None = None) -> Tensor:
        nodes = np.asarray(nodes, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        dt = t - self.last_update[nodes]
        if self.leaky_flush:
            dt = np.maximum(dt, 0.0)
        if np.any(dt < 0):
            raise CausalityError("embedding requested for a time before the node's last memory update")
        if mem_table is None:
            mem = F.constant(self.memory[nodes])
        else:
            mem = F.take(mem_table, row_of[nodes], axis=0)
        m = self.model
        return m.embed(F.concat([mem, m.embed_time(self._time_input(dt, t))], axis=-1))

    # ---------------------------------------------------------------- batches

    def _rng(self, *keys: int) -> np.random.Generator:
        return self.seeds.derive(*keys)

    def process_batch(self, src, dst, t, features, category, mode: str = "eval", batch_key: tuple = (0, 0),
                      candidates: int = 0) -> StepOutput:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        n = len(t)
        if n == 0:
            return StepOutput(0, np.zeros(0), np.zeros(0), np.zeros((0, self.n_classes)), math.nan)
        if np.any(np.diff(t) < 0) or t[0] < self.clock:
            raise CausalityError(f"batch starting at t={t[0]} precedes already processed time {self.clock}")
        training = mode == "train"
        tag = _TRAIN if training else _EVAL
        B = max(self.cfg.batch_size, n)
        neg = sample_negatives(dst, self.victims, self._rng(tag, *batch_key), size=B)

        if self.leaky_flush:
            self._commit(*self.flush())
            self.store(src, dst, t, features, category)

        with Tape() as tape:
            new, upd = self.flush(training, self._rng(_DROP, *batch_key) if training else None)
            if new is None:
                mem_table, row_of = F.constant(self.memory), np.arange(self.n_nodes)
            else:
                mem_table = F.concat([F.constant(self.memory), new], axis=0)
                row_of = np.arange(self.n_nodes)
                row_of[upd] = self.n_nodes + np.arange(len(upd))
            pad = B - n
            ps = np.concatenate([src, np.repeat(src[:1], pad)])
            pd = np.concatenate([dst, np.repeat(dst[:1], pad)])
            pn = np.concatenate([neg, np.repeat(neg[:1], pad)])
            pt = np.concatenate([t, np.repeat(t[:1], pad)])
            e_src = self.compute_embedding(ps, pt, mem_table, row_of)
            e_dst = self.compute_embedding(pd, pt, mem_table, row_of)
            e_neg = self.compute_embedding(pn, pt, mem_table, row_of)
            p_pos = F.take(self.model.link(e_src, e_dst), np.arange(n))
            p_neg = F.take(self.model.link(e_src, e_neg), np.arange(n))
            cat = F.take(self.model.category(e_src, e_dst), np.arange(n), axis=0)
            link_l = bce_loss(F.concat([p_pos, p_neg]), np.concatenate([np.ones(n), np.zeros(n)]))
            cat_l = focal_loss(cat, np.asarray(category, dtype=np.int64), self.focal)
            loss = joint_loss(link_l, cat_l, self.cfg.lam)
            rank = None
            if candidates:
                rank = self._rank_scores(ps, pd, pt, e_src, mem_table, row_of, candidates, batch_key)[:n]
        if not np.isfinite(loss.data):
            raise TrainingError("non-finite loss", {"step": self.step, "batch_key": list(batch_key),
                                                    "t0": float(t[0]), "n": n})
        if training:
            grads = tape.backward(loss)
            self.optimizer.step(grads)
            self.step += 1
        self._commit(new, upd)
        if not self.leaky_flush:
            self.store(src, dst, t, features, category)
        self.clock = float(t[-1])
        return StepOutput(n, p_pos.data.copy(), p_neg.data.copy(), cat.data.copy(), float(loss.data), rank)

    def _commit(self, new: Tensor | None, nodes: np.ndarray) -> None:
        if new is not None:
            self.memory[nodes] = new.data

    def _rank_scores(self, ps, pd, pt, e_src, mem_table, row_of, c, batch_key) -> np.ndarray:
        """Scores of each positive (column 0) and ``c`` sampled candidate destinations."""
        B = len(ps)
        rng = self._rng(_RANK, *batch_key)
        cand = sample_negatives(np.repeat(pd, c), self.victims, rng, size=B * c)
        e_c = self.compute_embedding(cand, np.repeat(pt, c), mem_table, row_of)
        e_s = F.take(e_src, np.repeat(np.arange(B), c), axis=0)
        scores = self.model.link(e_s, e_c).data.reshape(B, c)
        pos = self.model.link(e_src, self.compute_embedding(pd, pt, mem_table, row_of)).data
        return np.concatenate([pos[:, None], scores], axis=1)

    # ----------------------------------------------------------------- replay

    def batches(self, stream: EventStream):
        bs = self.cfg.batch_size
        for i, start in enumerate(range(0, len(stream), bs)):
            yield i, slice(start, min(start + bs, len(stream)))

    def run(self, stream: EventStream, mode: str = "eval", part: int = 0, candidates: int = 0,
            order: np.ndarray | None = None) -> RunOutput:
        """Process a partition batch by batch; returns per-event outputs in stream order."""
        outs = []
        for i, sl in self.batches(stream):
            outs.append(self.process_batch(stream.src[sl], stream.dst[sl], stream.t[sl], stream.features[sl],
                                           stream.category[sl], mode, (self.epoch, part, i), candidates))
        if not outs:
            empty = np.zeros(0)
            return RunOutput(empty, empty, np.zeros((0, self.n_classes)), None, [])
        rank = np.concatenate([o.rank_scores for o in outs]) if candidates else None
        return RunOutput(np.concatenate([o.p_pos for o in outs]), np.concatenate([o.p_neg for o in outs]),
                         np.concatenate([o.cat_probs for o in outs]), rank, [o.loss for o in outs])

    def train_epoch_shuffled(self, stream: EventStream, rng: np.random.Generator, part: int = 0) -> float:
        """One epoch visiting batches in random order.

        A gradient-free chronological pass records the state before every
        batch; each batch is then trained from its own recorded state, so
        every batch still only sees strictly earlier events.
        """
        snaps, spans = [], []
        for i, sl in self.batches(stream):
            snaps.append(self.snapshot())
            spans.append(sl)
            self.process_batch(stream.src[sl], stream.dst[sl], stream.t[sl], stream.features[sl],
                               stream.category[sl], "eval", (self.epoch, part, i))
        end = self.snapshot()
        losses = []
        for i in rng.permutation(len(spans)):
            self.restore_snapshot(snaps[i])
            sl = spans[i]
            out = self.process_batch(stream.src[sl], stream.dst[sl], stream.t[sl], stream.features[sl],
                                     stream.category[sl], "train", (self.epoch, part, int(i)))
            losses.append(out.loss)
        self.restore_snapshot(end)
        return float(np.mean(losses)) if losses else math.nan

    # ------------------------------------------------------------- checkpoint

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": p.data.copy() for k, p in self.params.items()}
        arrays.update({f"adam_m.{k}": v.copy() for k, v in self.optimizer.m.items()})
        arrays.update({f"adam_v.{k}": v.copy() for k, v in self.optimizer.v.items()})
        arrays["memory"] = self.memory.copy()
        arrays["last_update"] = self.last_update.copy()
        arrays["slots"] = self.slots.copy()
        arrays["alpha"] = self.focal.alpha.copy()
        arrays.update(self.records.arrays())
        for name, hist, width in (("node_hist", self.node_hist, 1), ("pair_hist", self.pair_hist, 2)):
            k, lens, vals = _flatten_hist(hist, width)
            arrays[f"{name}.keys"], arrays[f"{name}.lens"], arrays[f"{name}.vals"] = k, lens, vals
        return arrays

    def meta(self) -> dict:
        return {
            "format": FORMAT, "config": self.cfg.to_dict(), "aggregator": self.cfg.aggregator,
            "dims": {"n_nodes": self.n_nodes, "d_feat": self.d_feat, "n_classes": self.n_classes,
                     "d_mem": self.cfg.d_mem, "d_msg": self.cfg.d_msg, "d_node": self.cfg.d_node,
                     "d_time": self.cfg.d_time},
            "rng": {"algorithm": F.Rng.algorithm, "seed": self.cfg.seed},
            "step": self.step, "adam_t": self.optimizer.t, "epoch": self.epoch,
            "clock": None if self.clock == -math.inf else self.clock,
            "victims": self.victims.tolist(),
        }

    def checkpoint(self, path) -> None:
        container.save(path, CHECKPOINT_KIND, self.meta(), self.state_arrays())

    def checkpoint_bytes(self) -> bytes:
        return container.dumps(CHECKPOINT_KIND, self.meta(), self.state_arrays())

    @classmethod
    def restore(cls, path, expect_nodes: int | None = None) -> Engine:
        meta, arrays = container.load(path, CHECKPOINT_KIND)
        return cls.from_state(meta, arrays, expect_nodes)

    @classmethod
    def from_state(cls, meta: dict, arrays: dict, expect_nodes: int | None = None) -> Engine:
        if meta.get("format") != FORMAT:
            raise container.ContainerError(f"unsupported checkpoint format {meta.get('format')!r}")
        dims = meta["dims"]
        if expect_nodes is not None and expect_nodes != dims["n_nodes"]:
            raise F.DimensionError(f"checkpoint has {dims['n_nodes']} nodes, stream has {expect_nodes}")
        eng = cls(Config.from_dict(meta["config"]), dims["n_nodes"], dims["d_feat"], dims["n_classes"],
                  np.array(meta["victims"], dtype=np.int64), alpha=arrays["alpha"])
        eng.load_arrays(meta, arrays)
        return eng

    def load_arrays(self, meta: dict, arrays: dict) -> None:
        for prefix, target in (("param.", None), ("adam_m.", self.optimizer.m), ("adam_v.", self.optimizer.v)):
            for k, p in self.params.items():
                src = arrays.get(prefix + k)
                if src is None:
                    raise container.ContainerError(f"checkpoint lacks {prefix + k}")
                if src.shape != p.data.shape:
                    raise F.DimensionError(f"{prefix + k}: stored {src.shape} vs model {p.data.shape}")
                if target is None:
                    p.data[...] = src
                else:
                    target[k] = src.copy()
        if arrays["memory"].shape != self.memory.shape:
            raise F.DimensionError(f"memory shape {arrays['memory'].shape} vs {self.memory.shape}")
        self.memory = arrays["memory"].copy()
        self.last_update = arrays["last_update"].copy()
        self.slots = arrays["slots"].copy()
        self.records = RecordTable(self.d_edge, self.cfg.d_mem)
        self.records.load(arrays)
        self.node_hist = _unflatten_hist(arrays["node_hist.keys"], arrays["node_hist.lens"], arrays["node_hist.vals"], True)
        self.pair_hist = _unflatten_hist(arrays["pair_hist.keys"], arrays["pair_hist.lens"], arrays["pair_hist.vals"], False)
        self.step, self.optimizer.t, self.epoch = meta["step"], meta["adam_t"], meta["epoch"]
        self.clock = -math.inf if meta["clock"] is None else meta["clock"]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = arrays[k]


# --------------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    improved: bool


@dataclass
class TrainingLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def validations(self) -> int:
        return len(self.epochs)


def train(engine: Engine, train_part: EventStream, val_part: EventStream, epochs: int | None = None,
          patience: int | None = None, shuffle_rng: np.random.Generator | None = None, log=None) -> TrainingLog:
    """Per-epoch memory reset and chronological replay, early stopping on validation loss.

    The parameters of the best validation epoch are loaded back at the end.
    With ``shuffle_rng`` the training batches are visited in random order
    (see :meth:`Engine.train_epoch_shuffled`).
    """
    cfg = engine.cfg
    epochs = cfg.epochs if epochs is None else epochs
    patience = cfg.patience if patience is None else patience
    result = TrainingLog()
    best = engine.param_arrays()
    bad = 0
    for ep in range(epochs):
        engine.epoch = ep
        engine.init_memory()
        if shuffle_rng is None:
            train_loss = engine.run(train_part, "train", part=0).mean_loss
        else:
            train_loss = engine.train_epoch_shuffled(train_part, shuffle_rng, part=0)
        if not math.isfinite(train_loss):
            if len(train_part):
                raise TrainingError("non-finite training loss", {"epoch": ep})
        val_loss = engine.run(val_part, "eval", part=1).mean_loss if len(val_part) else train_loss
        improved = val_loss < result.best_val_loss
        if improved:
            result.best_val_loss, result.best_epoch = val_loss, ep
            best = engine.param_arrays()
            bad = 0
        else:
            bad += 1
        result.epochs.append(EpochLog(ep, train_loss, val_loss, improved))
        if log is not None:
            log(result.epochs[-1])
        if bad >= patience:
            result.stopped_early = True
            break
    engine.load_param_arrays(best)
    engine.init_memory()
    return result


def partitions_for(cfg: Config, stream: EventStream):
    """Balance (optional), split and mask with randomness derived from the config seed."""
    from .events import prepare_partitions

    return prepare_partitions(stream, F.Rng(cfg.seed).derive(7), cfg.new_node_fraction, cfg.balance)
