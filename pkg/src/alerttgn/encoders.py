"""Learnable building blocks on top of :mod:`alerttgn.numcore`.

Weights use the row-vector convention (``y = x @ W + b``, ``W`` is
``d_in x d_out``), so a batch of inputs is just a matrix.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import container
from . import numcore as F
from .numcore import DimensionError, Tensor


class Module:
    """Parameter bundle; parameters are found by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in params.items():
            src = arrays[k]
            if src.shape != p.data.shape:
                raise DimensionError(f"parameter {k}: stored shape {src.shape} vs model {p.data.shape}")
            p.data[...] = src


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def save_params(module: Module, path) -> None:
    container.save(path, "params", {"format": "named-float64/1"}, module.state_arrays())


def load_params(module: Module, path) -> None:
    _, arrays = container.load(path, "params")
    module.load_state_arrays(arrays)


class Affine(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in, self.d_out = d_in, d_out
        self.W = F.parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.b = F.parameter(uniform_init(rng, d_in, (d_out,)))

    def __call__(self, x) -> Tensor:
        x = F.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"affine expects width {self.d_in}, got {x.shape[-1]}")
        return F.add(F.matmul(x, self.W), self.b)


def project(e: Affine, z) -> Tensor:
    return e(z)


class TimeEncoder(Module):
    """``cos(omega * dt + phi)`` with log-spaced frequencies.

    Frequencies are fixed unless ``learnable``: over gaps of thousands of
    seconds a small step in omega rotates the phase arbitrarily.
    """

    def __init__(self, d_time: int, learnable: bool = False):
        self.d_time = d_time
        make = F.parameter if learnable else F.constant
        self.omega = make(1.0 / 10 ** np.linspace(0, 9, d_time))
        self.phi = make(np.zeros(d_time))

    def __call__(self, t) -> Tensor:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return F.cos(F.add(F.mul(F.constant(t), self.omega), self.phi))


def time_encode(enc: TimeEncoder, t: float) -> np.ndarray:
    return enc(np.array([t])).data[0]


class MessageFunction(Module):
    """Affine map of ``[mem_u, mem_v, edge_features, time_code]`` to the message width."""

    def __init__(self, d_mem: int, d_edge: int, d_time: int, d_msg: int, rng: np.random.Generator):
        self.widths = (d_mem, d_mem, d_edge, d_time)
        self.proj = Affine(2 * d_mem + d_edge + d_time, d_msg, rng)

    @property
    def d_msg(self) -> int:
        return self.proj.d_out

    def __call__(self, mem_u, mem_v, edge_features, time_code) -> Tensor:
        parts = [F.as_tensor(x) for x in (mem_u, mem_v, edge_features, time_code)]
        for p, w in zip(parts, self.widths):
            if p.shape[-1] != w:
                raise DimensionError(f"message input widths {[q.shape[-1] for q in parts]} != {list(self.widths)}")
        return self.proj(F.concat(parts, axis=-1))


def build_message(f: MessageFunction, mem_u, mem_v, edge_features, time_code) -> Tensor:
    return f(mem_u, mem_v, edge_features, time_code)


class GruCell(Module):
    """z = s(x Wz + h Uz + bz); r = s(x Wr + h Ur + br);
    h~ = tanh(x Wh + (r*h) Uh + bh); h' = (1 - z) * h + z * h~."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        u = lambda fan, shape: F.parameter(uniform_init(rng, fan, shape))
        self.W_z, self.W_r, self.W_h = (u(d_h, (d_in, d_h)) for _ in range(3))
        self.U_z, self.U_r, self.U_h = (u(d_h, (d_h, d_h)) for _ in range(3))
        self.b_z, self.b_r, self.b_h = (u(d_h, (d_h,)) for _ in range(3))

    def input_gates(self, x) -> tuple[Tensor, Tensor, Tensor]:
        """Input halves of the three gates; computed once for a whole sequence."""
        x = F.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"GRU input width {x.shape[-1]} != {self.d_in}")
        return (F.add(F.matmul(x, self.W_z), self.b_z),
                F.add(F.matmul(x, self.W_r), self.b_r),
                F.add(F.matmul(x, self.W_h), self.b_h))

    def step_from_gates(self, gz, gr, gh, h) -> Tensor:
        h = F.as_tensor(h)
        z = F.sigmoid(F.add(gz, F.matmul(h, self.U_z)))
        r = F.sigmoid(F.add(gr, F.matmul(h, self.U_r)))
        cand = F.tanh(F.add(gh, F.matmul(F.mul(r, h), self.U_h)))
        return F.add(F.mul(F.sub(1.0, z), h), F.mul(z, cand))

    def __call__(self, x, h) -> Tensor:
        x2 = F.as_tensor(x)
        h2 = F.as_tensor(h)
        if h2.shape[-1] != self.d_h:
            raise DimensionError(f"GRU state width {h2.shape[-1]} != {self.d_h}")
        squeeze = x2.ndim == 1
        if squeeze:
            x2, h2 = F.reshape(x2, (1, -1)), F.reshape(h2, (1, -1))
        out = self.step_from_gates(*self.input_gates(x2), h2)
        return F.reshape(out, (self.d_h,)) if squeeze else out


def gru_step(cell: GruCell, x, h) -> Tensor:
    return cell(x, h)


class BiGru(Module):
    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_h = d_h
        self.forward_cell = GruCell(d_in, d_h, rng)
        self.backward_cell = GruCell(d_in, d_h, rng)

    def final_states(self, x, mask: np.ndarray) -> Tensor:
        """Last-position BiGRU output for a batch of left-padded sequences.

        ``x`` is ``B x L x d_in`` with every sequence ending at position
        ``L - 1``; ``mask`` (``B x L``) marks real entries. Padded steps leave
        the forward state untouched. The backward direction at the last
        position has only seen the last element, so it is a single step from
        the zero state.
        """
        x = F.as_tensor(x)
        B, L, _ = x.shape
        gz, gr, gh = self.forward_cell.input_gates(x)
        h = F.constant(np.zeros((B, self.d_h)))
        m = np.asarray(mask, dtype=np.float64)
        for i in range(L):
            new = self.forward_cell.step_from_gates(gz[:, i, :], gr[:, i, :], gh[:, i, :], h)
            if m[:, i].all():
                h = new
            else:
                keep = m[:, i:i + 1]
                h = F.add(F.mul(keep, new), F.mul(1.0 - keep, h))
        last = x[:, L - 1, :]
        back = self.backward_cell(last, F.constant(np.zeros((B, self.d_h))))
        return F.concat([h, back], axis=-1)


def bigru_encode(net: BiGru, seq) -> tuple[Tensor, Tensor]:
    """All hidden states (``n x 2d_h``) and the last-position state (``2d_h``)."""
    seq = F.as_tensor(seq)
    n = seq.shape[0] if seq.ndim else 0
    if seq.ndim != 2 or n < 1:
        raise F.ContractError("bigru_encode needs a non-empty n x d sequence")
    zero = F.constant(np.zeros((1, net.d_h)))
    fwd, h = [], zero
    for i in range(n):
        h = net.forward_cell(seq[i:i + 1], h)
        fwd.append(h)
    bwd, h = [None] * n, zero
    for i in range(n - 1, -1, -1):
        h = net.backward_cell(seq[i:i + 1], h)
        bwd[i] = h
    rows = [F.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
    states = F.concat(rows, axis=0)
    return states, F.reshape(rows[-1], (2 * net.d_h,))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = F.parameter(np.ones(d))
        self.bias = F.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class TransformerBlock(Module):
    """Pre-norm encoder layer: x + MHSA(LN(x)), then + FFN(LN(.)). No positional encoding.

    ``residual_scale`` shrinks the initial output projections of both residual
    branches, so a freshly built block starts close to the identity.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_ff: int | None = None, dropout: float = 0.0,
                 residual_scale: float = 1.0):
        if d % heads:
            raise DimensionError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads, self.dropout = d, heads, dropout
        d_ff = d_ff or 2 * d
        self.ln1 = LayerNorm(d)
        self.W_q = F.parameter(uniform_init(rng, d, (d, d)))
        self.W_k = F.parameter(uniform_init(rng, d, (d, d)))
        self.W_v = F.parameter(uniform_init(rng, d, (d, d)))
        self.W_o = F.parameter(uniform_init(rng, d, (d, d)))
        self.b_o = F.parameter(np.zeros(d))
        self.ln2 = LayerNorm(d)
        self.ff1 = Affine(d, d_ff, rng)
        self.ff2 = Affine(d_ff, d, rng)
        for p in (self.W_o, self.ff2.W, self.ff2.b):
            p.data *= residual_scale

    def _split(self, x: Tensor, n: int) -> Tensor:
        dh = self.d // self.heads
        return F.transpose(F.reshape(x, (n, self.heads, dh)), (1, 0, 2))

    def attention(self, x: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        n = x.shape[0]
        dh = self.d // self.heads
        q = self._split(F.matmul(x, self.W_q), n)
        k = self._split(F.matmul(x, self.W_k), n)
        v = self._split(F.matmul(x, self.W_v), n)
        scores = F.scale(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn_mask = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            attn_mask = mask[None, None, :] if mask.ndim == 1 else mask[None, :, :]
        weights = F.softmax(scores, axis=-1, mask=attn_mask)
        mixed = F.reshape(F.transpose(F.matmul(weights, v), (1, 0, 2)), (n, self.d))
        return F.add(F.matmul(mixed, self.W_o), self.b_o), weights

    def __call__(self, x, mask: np.ndarray | None = None, rng: np.random.Generator | None = None,
                 training: bool = False, return_attention: bool = False):
        x = F.as_tensor(x)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != self.d:
            raise DimensionError(f"transformer expects n x {self.d} tokens, got {x.shape}")
        att, weights = self.attention(self.ln1(x), mask)
        x = F.add(x, F.dropout(att, self.dropout, rng, training))
        ff = self.ff2(F.relu(self.ff1(self.ln2(x))))
        out = F.add(x, F.dropout(ff, self.dropout, rng, training))
        return (out, weights) if return_attention else out


def transformer_encode(block: TransformerBlock, tokens, mask: np.ndarray | None = None) -> Tensor:
    return block(tokens, mask)
