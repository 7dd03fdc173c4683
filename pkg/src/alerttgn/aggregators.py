"""Message aggregators: last, mean, attention, bigru and bita.

Every aggregator reads a :class:`MessageBatch` - message rows grouped into
chronological sequences - and returns one vector per output node. For
node-scoped batches each sequence belongs to one node; for edge-scoped batches
(bita over per-pair histories) sequences are pairs and each node averages the
encodings of its incident pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as F
from .encoders import Affine, BiGru, Module, TimeEncoder, TransformerBlock
from .numcore import Tensor

KINDS = ("last", "mean", "attention", "bigru", "bita")


class ConfigError(ValueError):
    pass


@dataclass
class MessageBatch:
    """Flat message rows plus sequence bookkeeping.

    ``seq`` is non-decreasing and rows of one sequence are sorted by
    ``(t, arrival)``. ``incidence`` lists ``(output_row, sequence)`` pairs used
    by the readout; node-scoped batches use the identity.
    """

    messages: Tensor
    t: np.ndarray
    dt: np.ndarray
    seq: np.ndarray
    n_seq: int
    nodes: np.ndarray
    seq_nodes: np.ndarray
    incidence: np.ndarray | None = None

    def __post_init__(self):
        self.seq = np.asarray(self.seq, dtype=np.int64)
        if self.seq.size and np.any(np.diff(self.seq) < 0):
            raise ValueError("message rows must be grouped by sequence")
        self.lengths = np.bincount(self.seq, minlength=self.n_seq)
        if np.any(self.lengths == 0):
            raise ValueError("every sequence needs at least one message")

    @property
    def node_scoped(self) -> bool:
        return self.incidence is None

    @property
    def width(self) -> int:
        return self.messages.shape[1]

    def padded_index(self) -> tuple[np.ndarray, np.ndarray]:
        """``n_seq x L`` row indices, left-padded with ``N`` (a zero row), and the validity mask."""
        L = int(self.lengths.max())
        n = len(self.seq)
        starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
        idx = np.full((self.n_seq, L), n, dtype=np.int64)
        pos = np.arange(n) - starts[self.seq] + (L - self.lengths[self.seq])
        idx[self.seq, pos] = np.arange(n)
        return idx, idx < n

    def last_rows(self) -> np.ndarray:
        return np.cumsum(self.lengths) - 1

    def readout_matrix(self) -> np.ndarray:
        """Row-stochastic ``n_out x n_seq`` averaging matrix."""
        if self.incidence is None:
            return np.eye(self.n_seq)
        P = np.zeros((len(self.nodes), self.n_seq))
        rows, cols = self.incidence[:, 0], self.incidence[:, 1]
        P[rows, cols] = 1.0
        return P / P.sum(axis=1, keepdims=True)

    @classmethod
    def from_sequences(cls, seqs, times=None, dts=None, nodes=None) -> MessageBatch:
        """Node-scoped batch from a list of ``n_i x d`` arrays (one per node)."""
        msgs = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in seqs]
        times = times or [np.arange(len(m), dtype=np.float64) for m in msgs]
        dts = dts or [np.zeros(len(m)) for m in msgs]
        nodes = np.arange(len(msgs)) if nodes is None else np.asarray(nodes)
        return cls(
            messages=F.constant(np.concatenate(msgs)),
            t=np.concatenate([np.asarray(x, dtype=np.float64) for x in times]),
            dt=np.concatenate([np.asarray(x, dtype=np.float64) for x in dts]),
            seq=np.repeat(np.arange(len(msgs)), [len(m) for m in msgs]),
            n_seq=len(msgs), nodes=nodes, seq_nodes=np.stack([nodes, nodes], axis=1),
        )


def _readout(batch: MessageBatch, per_seq: Tensor) -> Tensor:
    if batch.node_scoped:
        return per_seq
    return F.matmul(F.constant(batch.readout_matrix()), per_seq)


def _padded(batch: MessageBatch, x: Tensor) -> tuple[Tensor, np.ndarray]:
    idx, mask = batch.padded_index()
    ext = F.concat([x, F.constant(np.zeros((1, x.shape[1])))], axis=0)
    return F.take(ext, idx, axis=0), mask


class Aggregator(Module):
    kind = ""
    width = 0

    def __call__(self, batch: MessageBatch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError


class LastAggregator(Aggregator):
    kind = "last"

    def __init__(self, width: int):
        self.width = width

    def __call__(self, batch, training=False, rng=None):
        return _readout(batch, F.take(batch.messages, batch.last_rows(), axis=0))


class MeanAggregator(Aggregator):
    kind = "mean"

    def __init__(self, width: int):
        self.width = width

    def __call__(self, batch, training=False, rng=None):
        padded, _ = _padded(batch, batch.messages)
        total = F.sum(padded, axis=1)
        return _readout(batch, F.mul(total, 1.0 / batch.lengths[:, None].astype(np.float64)))


class AttentionAggregator(Aggregator):
    """Convex combination of a node's messages, weights softmax(q . W_k m)."""

    kind = "attention"

    def __init__(self, width: int, rng: np.random.Generator):
        self.width = width
        self.key = Affine(width, width, rng)
        self.query = F.parameter(rng.uniform(-1, 1, size=(width, 1)) / np.sqrt(width))

    def weights(self, batch: MessageBatch) -> Tensor:
        scores = F.matmul(self.key(batch.messages), self.query)  # N x 1
        padded, mask = _padded(batch, scores)
        return F.softmax(F.reshape(padded, mask.shape), axis=-1, mask=mask)

    def __call__(self, batch, training=False, rng=None):
        w = self.weights(batch)
        padded, _ = _padded(batch, batch.messages)
        mixed = F.sum(F.mul(F.reshape(w, (*w.shape, 1)), padded), axis=1)
        return _readout(batch, mixed)


class BiGruAggregator(Aggregator):
    """Last-position BiGRU state of the time-encoded sequence, projected to the aggregate width."""

    kind = "bigru"

    def __init__(self, width: int, d_hidden: int, rng: np.random.Generator):
        self.width = width
        self.time = TimeEncoder(width)
        self.bigru = BiGru(width, d_hidden, rng)
        self.head = Affine(2 * d_hidden, width, rng)

    def encode(self, batch: MessageBatch) -> Tensor:
        x = F.add(batch.messages, self.time(batch.dt))
        padded, mask = _padded(batch, x)
        return self.bigru.final_states(padded, mask)

    def __call__(self, batch, training=False, rng=None):
        return _readout(batch, self.head(self.encode(batch)))


class BitaAggregator(Aggregator):
    """BiGRU per sequence, projection, one self-attention pass over all
    sequences of the batch, then mean readout per node.

    ``attention_scope="shared_node"`` lets a sequence attend only to
    sequences that share an endpoint with it. The attention block starts near
    the identity (``residual_scale``): its inputs mix every sequence of the
    batch, so full-size random residual branches inject batch-dependent noise
    the heads cannot undo early in training.
    """

    kind = "bita"

    def __init__(self, width: int, d_hidden: int, heads: int, rng: np.random.Generator,
                 dropout: float = 0.0, layers: int = 1, attention_scope: str = "batch",
                 residual_scale: float = 0.1):
        if attention_scope not in ("batch", "shared_node"):
            raise ConfigError(f"unknown attention scope {attention_scope!r}")
        self.width = width
        self.attention_scope = attention_scope
        self.time = TimeEncoder(width)
        self.bigru = BiGru(width, d_hidden, rng)
        self.proj = Affine(2 * d_hidden, width, rng)
        self.blocks = [TransformerBlock(width, heads, rng, dropout=dropout, residual_scale=residual_scale) for _ in range(layers)]

    def attention_mask(self, batch: MessageBatch) -> np.ndarray | None:
        if self.attention_scope == "batch":
            return None
        a, b = batch.seq_nodes[:, 0], batch.seq_nodes[:, 1]
        return (a[:, None] == a[None, :]) | (a[:, None] == b[None, :]) | (b[:, None] == a[None, :]) | (b[:, None] == b[None, :])

    def contextual(self, batch: MessageBatch, training=False, rng=None) -> Tensor:
        x = F.add(batch.messages, self.time(batch.dt))
        padded, mask = _padded(batch, x)
        tokens = self.proj(self.bigru.final_states(padded, mask))
        attn_mask = self.attention_mask(batch)
        for block in self.blocks:
            tokens = block(tokens, attn_mask, rng=rng, training=training)
        return tokens

    def __call__(self, batch, training=False, rng=None):
        if batch.n_seq == 0:
            return F.constant(np.zeros((0, self.width)))
        return _readout(batch, self.contextual(batch, training, rng))


def make_aggregator(kind: str, width: int, rng: np.random.Generator, d_hidden: int | None = None, heads: int = 2,
                    dropout: float = 0.0, layers: int = 1, attention_scope: str = "batch") -> Aggregator:
    d_hidden = d_hidden or max(1, width // 2)
    if kind == "last":
        return LastAggregator(width)
    if kind == "mean":
        return MeanAggregator(width)
    if kind == "attention":
        return AttentionAggregator(width, rng)
    if kind == "bigru":
        return BiGruAggregator(width, d_hidden, rng)
    if kind == "bita":
        return BitaAggregator(width, d_hidden, heads, rng, dropout, layers, attention_scope)
    raise ConfigError(f"unknown aggregator {kind!r}; expected one of {', '.join(KINDS)}")


def dispatch(agg: Aggregator, batch: MessageBatch, training: bool = False, rng=None) -> Tensor:
    return agg(batch, training, rng)


def aggregate_last(batch: MessageBatch) -> Tensor:
    return LastAggregator(batch.width)(batch)


def aggregate_mean(batch: MessageBatch) -> Tensor:
    return MeanAggregator(batch.width)(batch)


def aggregate_attention(batch: MessageBatch, agg: AttentionAggregator) -> Tensor:
    return agg(batch)


def aggregate_bigru(batch: MessageBatch, agg: BiGruAggregator) -> Tensor:
    return agg(batch)


def aggregate_bita(batch: MessageBatch, agg: BitaAggregator, training=False, rng=None) -> Tensor:
    return agg(batch, training, rng)
