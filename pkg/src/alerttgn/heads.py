"""Link and category heads plus the joint BCE + focal objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as F
from .encoders import Affine, Module
from .numcore import ContractError, DimensionError, Tensor

CLAMP = 1e-12


class ClassWeightError(ValueError):
    pass


class _TwoLayer(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.hidden = Affine(d_in, d_hidden, rng)
        self.out = Affine(d_hidden, d_out, rng)

    def logits(self, x) -> Tensor:
        return self.out(F.relu(self.hidden(x)))


class LinkHead(_TwoLayer):
    """Scalar logit for a directed (source, destination) embedding pair."""

    def __init__(self, d_node: int, rng: np.random.Generator, d_hidden: int | None = None):
        super().__init__(2 * d_node, d_hidden or d_node, 1, rng)

    def __call__(self, emb_src, emb_dst) -> Tensor:
        x = _pair(emb_src, emb_dst, self.d_in)
        return F.sigmoid(F.reshape(self.logits(x), x.shape[:-1]))


class CategoryHead(_TwoLayer):
    """K-way softmax over the same pair representation."""

    def __init__(self, d_node: int, n_classes: int, rng: np.random.Generator, d_hidden: int | None = None):
        if n_classes < 1:
            raise ContractError("category head needs at least one class")
        super().__init__(2 * d_node, d_hidden or d_node, n_classes, rng)
        self.n_classes = n_classes

    def __call__(self, emb_src, emb_dst) -> Tensor:
        return F.softmax(self.logits(_pair(emb_src, emb_dst, self.d_in)), axis=-1)


def _pair(a, b, width: int) -> Tensor:
    x = F.concat([F.as_tensor(a), F.as_tensor(b)], axis=-1)
    if x.shape[-1] != width:
        raise DimensionError(f"pair embedding width {x.shape[-1]} != head input {width}")
    return x


def predict_link(head: LinkHead, emb_src, emb_dst) -> Tensor:
    return head(emb_src, emb_dst)


def predict_category(head: CategoryHead, emb_src, emb_dst) -> Tensor:
    return head(emb_src, emb_dst)


def bce_loss(prob, label) -> Tensor:
    """Per-element binary cross-entropy on clamped probabilities."""
    p = F.clip(F.as_tensor(prob), CLAMP, 1.0 - CLAMP)
    y = np.asarray(label, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"labels {y.shape} vs probabilities {p.shape}")
    pos = F.mul(F.log(p), y)
    neg = F.mul(F.log(F.sub(F.constant(np.ones(p.shape)), p)), 1.0 - y)
    return F.neg(F.add(pos, neg))


@dataclass
class FocalLossCfg:
    alpha: np.ndarray = field(default_factory=lambda: np.ones(1))
    gamma: float = 2.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if np.any(self.alpha <= 0):
            raise ContractError("focal class weights must be positive")
        if self.gamma < 0:
            raise ContractError("focal gamma must be non-negative")


def _one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1 and y.dtype.kind in "iu":
        if np.any((y < 0) | (y >= k)):
            raise ContractError("class label out of range")
        return np.eye(k)[y]
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[-1] != k or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ContractError("malformed one-hot target: need exactly one 1 per row")
    return y


def focal_loss(probs, y, cfg: FocalLossCfg) -> Tensor:
    """Per-row ``-sum_k alpha_k (1 - p_k)^gamma y_k log p_k``.

    ``y`` is either integer labels or one-hot rows. Returns one loss per row.
    """
    p = F.as_tensor(probs)
    squeeze = p.ndim == 1
    if squeeze:
        p = F.reshape(p, (1, p.shape[0]))
    k = p.shape[-1]
    onehot = _one_hot(y, k)
    alpha = cfg.alpha if cfg.alpha.size == k else np.broadcast_to(cfg.alpha, (k,))
    pc = F.clip(p, CLAMP, 1.0 - CLAMP)
    # only the true-class column contributes, so gather it first
    p_true = F.sum(F.mul(pc, onehot), axis=-1)
    a_true = onehot @ alpha
    modulator = F.power(F.sub(F.constant(np.ones(p_true.shape)), p_true), cfg.gamma) if cfg.gamma else None
    ce = F.neg(F.log(p_true))
    out = F.mul(ce, a_true) if modulator is None else F.mul(F.mul(modulator, ce), a_true)
    return F.reshape(out, ()) if squeeze else out


def cross_entropy(probs, y) -> Tensor:
    p = F.as_tensor(probs)
    k = p.shape[-1]
    return focal_loss(p, y, FocalLossCfg(alpha=np.ones(k), gamma=0.0))


def joint_loss(link_losses, category_losses, lam: float = 1.0) -> Tensor:
    """Mean link loss over positives and negatives plus ``lam`` times mean category loss over positives."""
    link = F.mean(F.as_tensor(link_losses))
    if lam == 0.0:
        return link
    cat = F.as_tensor(category_losses)
    if cat.data.size == 0:
        return link
    return F.add(link, F.scale(F.mean(cat), lam))


def class_weights(category: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Inverse-frequency weights ``N / (K count_k)`` rescaled to mean 1."""
    category = np.asarray(category, dtype=np.int64)
    k = int(n_classes if n_classes is not None else (category.max() + 1 if category.size else 0))
    counts = np.bincount(category, minlength=k).astype(np.float64)
    if k == 0 or np.any(counts == 0):
        absent = np.flatnonzero(counts == 0).tolist()
        raise ClassWeightError(
            f"classes {absent} have no training events; enable balancing or drop them from the schema"
        )
    w = category.size / (k * counts)
    return w / w.mean()
