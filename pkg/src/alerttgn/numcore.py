"""Dense float64 arrays with a define-by-run reverse-mode tape.

Arrays are plain ``numpy.ndarray`` (float64, C order). A :class:`Tensor` wraps
one array; operations executed while a :class:`Tape` is active and touching at
least one tracked input are appended to that tape, and :meth:`Tape.backward`
walks the record in strict reverse order.

    with Tape() as tape:
        loss = F.sum(F.matmul(x, w))
    grads = tape.backward(loss)      # {w: dloss/dw}

Outside of a tape every op is a plain numpy computation, which is what the
engine uses for inference.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumcoreError(Exception):
    pass


class DimensionError(NumcoreError, ValueError):
    pass


class DomainError(NumcoreError, ValueError):
    pass


class ContractError(NumcoreError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tensors and the tape


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=DTYPE))


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=DTYPE), requires_grad=True, name=name)


_state = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class Tape:
    """Append-only operation record. One tape per thread, one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every tracked leaf."""
        if self.consumed:
            raise ContractError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        leaf_grads: dict[Tensor, np.ndarray] = {}
        if loss._tape is not self:
            if loss.requires_grad:
                leaf_grads[loss] = np.ones_like(loss.data)
            return leaf_grads
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        # owned[j]: grads[j] is private to node j and may be updated in place
        owned = [False] * len(self.nodes)
        grads[loss._node] = np.ones_like(loss.data)
        for i in range(loss._node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            needs = tuple(self.tracks(p) for p in node.parents)
            parent_grads = node.backward(g, needs)
            for p, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                if p._tape is self:
                    j = p._node
                    grads[j], owned[j] = _accumulate(grads[j], owned[j], pg, p.shape)
                else:
                    prev = leaf_grads.get(p)
                    acc, mine = _accumulate(prev, prev is not None, pg, p.shape)
                    leaf_grads[p] = acc if mine else acc.copy()
            grads[i] = None
        return leaf_grads


class _SliceGrad:
    """Gradient that is non-zero only on ``target[idx]``."""

    __slots__ = ("idx", "value")

    def __init__(self, idx, value: np.ndarray):
        self.idx = idx
        self.value = value


def _accumulate(acc, owned: bool, g, shape) -> tuple[np.ndarray, bool]:
    if isinstance(g, _SliceGrad):
        if acc is None:
            acc = np.zeros(shape, dtype=DTYPE)
        elif not owned:
            acc = acc.copy()
        acc[g.idx] += g.value
        return acc, True
    if acc is None:
        return g, False
    if owned:
        acc += g
        return acc, True
    return acc + g, True


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(out, parents, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g, n: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g, n):
        return (_unbroadcast(g * bd, ad.shape) if n[0] else None,
                _unbroadcast(g * ad, bd.shape) if n[1] else None)

    return _emit(ad * bd, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g, n: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g, n: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g, n: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g, n: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _emit(np.where(m, a.data, 0.0), (a,), lambda g, n: (g * m,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g, n: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _emit(np.log(x), (a,), lambda g, n: (g / x,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.cos(x), (a,), lambda g, n: (-g * np.sin(x),))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a scalar exponent; the base must be positive unless p is a whole number >= 1."""
    a = as_tensor(a)
    x = a.data
    out = np.power(x, p)

    def bw(g, n):
        if p == 0:
            return (np.zeros_like(x),)
        return (g * p * np.power(x, p - 1),)

    return _emit(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit(np.clip(x, lo, hi), (a,), lambda g, n: (g * inside,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log, "cos": cos, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(tag: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if tag in _BINARY:
        if b is None:
            raise ContractError(f"{tag} needs two operands")
        a_, b_ = as_tensor(a), as_tensor(b)
        if a_.shape != b_.shape:
            raise DimensionError(f"{tag}: shapes {a_.shape} and {b_.shape} differ")
        return _BINARY[tag](a_, b_)
    if tag in _UNARY:
        return _UNARY[tag](a)
    raise ContractError(f"unknown elementwise tag {tag!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
        return reshape(matmul(reshape(a, (1, ad.shape[0])), b), (bd.shape[1],))
    if ad.ndim > 2 and bd.ndim == 2 and ad.shape[-1] == bd.shape[0]:
        # stacked rows times one matrix
        lead = ad.shape[:-1]
        flat = ad.reshape(-1, ad.shape[-1])

        def bw_rows(g, n):
            g2 = g.reshape(-1, g.shape[-1])
            da = (g2 @ bd.T).reshape(ad.shape) if n[0] else None
            db = flat.T @ g2 if n[1] else None
            return da, db

        return _emit((flat @ bd).reshape(*lead, bd.shape[1]), (a, b), bw_rows)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def bw(g, n):
        da = g @ np.swapaxes(bd, -1, -2) if n[0] else None
        db = np.swapaxes(ad, -1, -2) @ g if n[1] else None
        return da, db

    return _emit(ad @ bd, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g, n: (g.transpose(inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g, n: (g.reshape(old),))


def concat(items: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in items]
    if not ts:
        raise DimensionError("concat of nothing")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g, n):
        return np.split(g, sizes, axis=axis)

    return _emit(data, tuple(ts), bw)


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (rows by default); repeats allowed."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g, n):
        out = np.zeros(shape, dtype=DTYPE)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _emit(np.take(a.data, idx, axis=axis), (a,), bw)


def index(a, idx) -> Tensor:
    """Basic slicing (``a[i]``, ``a[:, 2:5]``); fancy indexing goes through :func:`take`."""
    a = as_tensor(a)
    shape = a.shape

    return _emit(np.array(a.data[idx], dtype=DTYPE), (a,), lambda g, n: (_SliceGrad(idx, g),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out, dtype=DTYPE), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# composite primitives with fused derivatives


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (broadcastable bool, True = keep) zeroes excluded entries exactly."""
    a = as_tensor(a)
    x = a.data
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ContractError("softmax row with every position masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g, n):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), bw)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: feature width {d} vs gain {gain.shape} / bias {bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g, n):
        lead = tuple(range(g.ndim - 1))
        dgain = np.sum(g * xhat, axis=lead) if n[1] else None
        dbias = np.sum(g, axis=lead) if n[2] else None
        dx = None
        if n[0]:
            gh = g * gd
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _emit(out, (a, gain, bias), bw)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit(a.data * keep, (a,), lambda g, n: (g * keep,))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    finite: bool = True
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.finite and all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients with central differences, entry by entry.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is ~0 from dividing noise by noise.
    ``f`` must be deterministic and rebuild its graph on every call.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    report = GradCheckReport(tol=tol)
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        report.finite = False
        report.message = "non-finite loss"
        return report
    grads = tape.backward(loss)
    for name, p in params.items():
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
            report.finite = False
            report.message = f"non-finite gradient for {name}"
            report.max_rel_error[name] = math.inf
            continue
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        report.max_rel_error[name] = float(np.max(np.abs(analytic - numeric) / denom)) if p.data.size else 0.0
    return report


# ---------------------------------------------------------------------------
# seeded randomness


class Rng:
    """Seeded PCG64 stream (numpy's ``Generator``); children derive from (seed, *keys)."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *keys: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *keys])))

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state
