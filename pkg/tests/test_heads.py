from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alerttgn import numcore as F
from alerttgn.heads import (CategoryHead, ClassWeightError, FocalLossCfg, LinkHead, bce_loss, class_weights,
                            cross_entropy, focal_loss, joint_loss, predict_category, predict_link)
from alerttgn.numcore import ContractError, DimensionError


def _zero(module):
    for p in module.parameters().values():
        p.data[...] = 0.0
    return module


def _manual(head, a, b):
    x = np.concatenate([a, b], axis=-1)
    h = np.maximum(x @ head.hidden.W.data + head.hidden.b.data, 0.0)
    return h @ head.out.W.data + head.out.b.data


def test_link_head_examples():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    head = LinkHead(3, rng)
    oracle = 1.0 / (1.0 + np.exp(-_manual(head, a, b)[:, 0]))
    assert np.max(np.abs(predict_link(head, a, b).data - oracle)) < 1e-12
    head.out.b.data[...] = 50.0
    head.out.W.data[...] = 0.0
    assert np.all(predict_link(head, a, b).data > 1 - 1e-9)
    assert np.array_equal(predict_link(_zero(head), a, b).data, np.full(5, 0.5))
    with pytest.raises(DimensionError):
        predict_link(head, a, rng.normal(size=(5, 2)))


def test_link_head_is_directed():
    rng = np.random.default_rng(1)
    head = LinkHead(3, rng)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert predict_link(head, a, b).data != predict_link(head, b, a).data


def test_category_head_examples():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    head = CategoryHead(3, 4, rng)
    logits = _manual(head, a, b)
    oracle = np.exp(logits - logits.max(1, keepdims=True))
    oracle /= oracle.sum(1, keepdims=True)
    out = predict_category(head, a, b).data
    assert np.max(np.abs(out - oracle)) < 1e-12
    assert np.max(np.abs(out.sum(1) - 1.0)) <= 1e-12
    _zero(head)
    assert np.array_equal(predict_category(head, a, b).data, np.full((6, 4), 0.25))
    head.out.b.data[0] = 10.0
    assert np.all(predict_category(head, a, b).data.argmax(1) == 0)


def test_bce_examples():
    assert abs(bce_loss(0.5, 1).data - math.log(2)) < 1e-12
    assert abs(bce_loss(1 - 1e-12, 1).data - 1e-12) < 1e-15
    assert abs(bce_loss(0.8, 0).data - 1.6094379124341003) < 1e-12
    assert np.isfinite(bce_loss([0.0, 1.0], [1, 0]).data).all()


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1))
def test_bce_non_negative(p, y):
    assert bce_loss(p, y).data >= 0


def test_focal_examples():
    ones = FocalLossCfg(alpha=np.ones(2), gamma=0.0)
    assert abs(focal_loss([0.8, 0.2], [1.0, 0.0], ones).data + math.log(0.8)) < 1e-12
    two = FocalLossCfg(alpha=np.ones(2), gamma=2.0)
    assert abs(focal_loss([0.8, 0.2], [1.0, 0.0], two).data - 0.04 * -math.log(0.8)) < 1e-12
    for gamma in (0.0, 1.0, 2.0, 5.0):
        for alpha in (0.1, 1.0, 7.0):
            cfg = FocalLossCfg(alpha=np.full(2, alpha), gamma=gamma)
            assert focal_loss([1 - 1e-13, 1e-13], [1.0, 0.0], cfg).data < 1e-11


def test_focal_rejects_malformed_targets():
    cfg = FocalLossCfg(alpha=np.ones(3))
    for y in ([1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.5, 0.0]):
        with pytest.raises(ContractError):
            focal_loss([0.2, 0.3, 0.5], y, cfg)
    with pytest.raises(ContractError):
        focal_loss(np.full((1, 3), 1 / 3), np.array([3]), cfg)
    with pytest.raises(ContractError):
        FocalLossCfg(alpha=np.array([1.0, 0.0]))


def test_focal_gamma_zero_equals_cross_entropy():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(5), size=1000)
    y = rng.integers(0, 5, size=1000)
    focal = focal_loss(probs, y, FocalLossCfg(alpha=np.ones(5), gamma=0.0)).data
    ce = -np.log(np.clip(probs[np.arange(1000), y], 1e-12, 1 - 1e-12))
    assert np.max(np.abs(focal - ce)) <= 1e-12
    assert np.max(np.abs(cross_entropy(probs, y).data - ce)) <= 1e-12


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 4.0])
def test_focal_monotone_in_true_probability(gamma):
    grid = np.linspace(1e-6, 1 - 1e-6, 500)
    probs = np.stack([grid, 1 - grid], axis=1)
    losses = focal_loss(probs, np.zeros(500, dtype=np.int64), FocalLossCfg(alpha=np.array([1.3, 0.7]),
                                                                           gamma=gamma)).data
    assert np.all(np.diff(losses) <= 0)


def test_joint_loss_examples():
    assert joint_loss([0.3, 0.5], [9.0], lam=0.0).data == 0.4
    assert joint_loss([0.5], [0.5], lam=1.0).data == 1.0
    # two positives and two negatives, hand-set probabilities
    p_link, y_link = np.array([0.9, 0.6, 0.3, 0.2]), np.array([1, 1, 0, 0])
    p_cat = np.array([[0.7, 0.2, 0.1], [0.1, 0.5, 0.4]])
    y_cat = np.array([0, 2])
    alpha = np.array([1.0, 2.0, 0.5])
    link = [-math.log(0.9), -math.log(0.6), -math.log(0.7), -math.log(0.8)]
    cat = [1.0 * 0.3**2 * -math.log(0.7), 0.5 * 0.6**2 * -math.log(0.4)]
    manual = math.fsum(link) / 4 + 0.5 * math.fsum(cat) / 2
    got = joint_loss(bce_loss(p_link, y_link), focal_loss(p_cat, y_cat, FocalLossCfg(alpha, 2.0)), lam=0.5)
    assert abs(got.data - manual) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_joint_loss_grad_check(seed):
    rng = np.random.default_rng(seed)
    link, cat = LinkHead(3, rng), CategoryHead(3, 4, rng)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    y = np.array([1, 1, 0, 0])
    labels = rng.integers(0, 4, size=2)
    cfg = FocalLossCfg(alpha=rng.uniform(0.5, 2.0, 4), gamma=2.0)

    def loss():
        return joint_loss(bce_loss(link(a, b), y), focal_loss(cat(a[:2], b[:2]), labels, cfg), lam=1.0)

    rep = F.grad_check(loss, {**{f"l.{k}": p for k, p in link.parameters().items()},
                              **{f"c.{k}": p for k, p in cat.parameters().items()}}, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_class_weights_examples():
    assert np.array_equal(class_weights(np.repeat([0, 1, 2], 7)), np.ones(3))
    assert np.array_equal(class_weights(np.zeros(5, dtype=int)), [1.0])
    w = class_weights(np.repeat([0, 1], [90, 10]))
    # inverse frequency keeps the 9:1 count ratio; mean-1 scaling gives 0.2 and 1.8
    raw = np.array([100 / 180, 100 / 20])
    assert np.max(np.abs(w - raw / raw.mean())) < 1e-12
    assert abs(w.mean() - 1.0) < 1e-12
    with pytest.raises(ClassWeightError, match="balancing"):
        class_weights(np.array([0, 0, 2]), 3)
