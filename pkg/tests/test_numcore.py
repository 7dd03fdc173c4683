from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alerttgn import numcore as F
from alerttgn.numcore import ContractError, DimensionError, DomainError, Tape


def _triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_projector():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(F.matmul(np.eye(2), x).data, x)
    proj = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(F.matmul(proj, [[5.0, 6.0], [7.0, 8.0]]).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(F.matmul(a, b).data - _triple_loop(a, b))) < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        F.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = np.random.default_rng(0)
    A, B, C = (rng.normal(size=(5, 5)) for _ in range(3))
    left = F.matmul(F.matmul(A, B), C).data
    right = F.matmul(A, F.matmul(B, C)).data
    assert np.max(np.abs(left - right)) < 1e-9


def test_elementwise_values():
    assert F.elementwise("sigmoid", [0.0]).data[0] == 0.5
    assert F.elementwise("tanh", [0.0]).data[0] == 0.0
    assert abs(F.elementwise("log", F.elementwise("exp", [1.0])).data[0] - 1.0) < 1e-12


def test_elementwise_errors():
    with pytest.raises(DimensionError):
        F.elementwise("add", np.ones(2), np.ones(3))
    with pytest.raises(DomainError):
        F.elementwise("log", [0.0])
    with pytest.raises(DomainError):
        F.log([-1.0])


def test_sigmoid_extremes_finite():
    out = F.sigmoid([-1000.0, 1000.0]).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_softmax_examples():
    assert np.array_equal(F.softmax([0.0, 0.0]).data, [0.5, 0.5])
    assert np.array_equal(F.softmax([1000.0, 1000.0]).data, [0.5, 0.5])
    x = [1.0, 2.0, 3.0]
    ex = [math.exp(v) for v in x]
    oracle = [e / math.fsum(ex) for e in ex]
    assert np.max(np.abs(F.softmax(x).data - oracle)) < 1e-12


def test_softmax_empty_axis_and_all_masked():
    with pytest.raises(DimensionError):
        F.softmax(np.zeros((2, 0)), axis=-1)
    with pytest.raises(ContractError):
        F.softmax(np.zeros((1, 3)), axis=-1, mask=np.zeros((1, 3), dtype=bool))


def test_softmax_masked_entries_exactly_zero():
    mask = np.array([[True, False, True]])
    out = F.softmax(np.array([[5.0, 9.0, 1.0]]), axis=-1, mask=mask).data
    assert out[0, 1] == 0.0
    assert abs(out.sum() - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_distribution(values):
    out = F.softmax(np.array(values)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-12


def test_layer_norm_examples():
    g, b = np.ones(3), np.zeros(3)
    assert np.array_equal(F.layer_norm(np.full((1, 3), 7.0), g, b).data, np.zeros((1, 3)))
    out = F.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-300).data
    assert np.max(np.abs(out - [[1.0, -1.0]])) < 1e-12
    bias = np.array([0.5, -2.0, 3.0])
    out = F.layer_norm(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(3), bias).data
    assert np.array_equal(out, np.broadcast_to(bias, (4, 3)))


def test_backward_hand_derivative():
    W = F.parameter(np.random.default_rng(1).normal(size=(2, 3)))
    x = np.array([[0.5], [-1.0], [2.0]])
    with Tape() as tape:
        loss = F.sum(F.matmul(W, x))
    grads = tape.backward(loss)
    assert np.array_equal(grads[W], np.broadcast_to(x.T, (2, 3)))


def test_backward_unused_parameter_zero_and_contracts():
    p, q = F.parameter([1.0, 2.0]), F.parameter([3.0])
    with Tape() as tape:
        loss = F.sum(F.mul(p, p))
    grads = tape.backward(loss)
    assert np.array_equal(grads.get(q, np.zeros(1)), [0.0])
    with pytest.raises(ContractError):
        tape.backward(loss)
    with Tape() as tape2:
        vec = F.mul(p, p)
    with pytest.raises(ContractError):
        tape2.backward(vec)


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    W = F.parameter(rng.normal(size=(4, 4)))
    x = rng.normal(size=(6, 4))

    def run():
        with Tape() as tape:
            h = F.tanh(F.matmul(x, W))
            loss = F.sum(F.softmax(F.matmul(h, W), axis=-1) * h)
        return tape.backward(loss)[W]

    assert np.array_equal(run(), run())


def test_grad_check_half_norm():
    p = F.parameter(np.random.default_rng(2).normal(size=5))
    rep = F.grad_check(lambda: F.scale(F.sum(F.mul(p, p)), 0.5), {"p": p})
    assert rep.passed and rep.worst < 1e-8


def test_grad_check_reports_non_finite():
    p = F.parameter([1.0])
    rep = F.grad_check(lambda: F.sum(F.mul(F.constant([np.inf]), p)), {"p": p})
    assert not rep.finite and not rep.passed


_UNARY = {
    "sigmoid": F.sigmoid, "tanh": F.tanh, "relu": lambda a: F.relu(a), "exp": F.exp,
    "cos": F.cos, "log": lambda a: F.log(F.add(F.mul(a, a), 1.0)),
    "power": lambda a: F.power(F.add(F.mul(a, a), 0.5), 1.7),
    "softmax": lambda a: F.softmax(a, axis=-1),
    "transpose": lambda a: F.transpose(a), "reshape": lambda a: F.reshape(a, (-1,)),
    "sum_axis": lambda a: F.sum(a, axis=0), "mean": lambda a: F.mean(a, axis=1),
    "take": lambda a: F.take(a, np.array([2, 0, 2]), axis=0),
    "index": lambda a: a[1:],
    "concat": lambda a: F.concat([a, F.scale(a, 2.0)], axis=1),
    "clip": lambda a: F.clip(a, -0.3, 0.4),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a = F.parameter(rng.normal(size=(3, 4)))
    if name == "relu" or name == "clip":
        # keep away from the kinks
        a.data[np.abs(a.data) < 0.05] += 0.2
        a.data[np.abs(a.data - 0.4) < 0.05] += 0.2
        a.data[np.abs(a.data + 0.3) < 0.05] += 0.2
    w = rng.normal(size=_UNARY[name](F.constant(a.data)).shape)
    rep = F.grad_check(lambda: F.sum(F.mul(_UNARY[name](a), w)), {"a": a})
    assert rep.passed, rep.max_rel_error


@pytest.mark.parametrize("seed", range(5))
def test_binary_and_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = F.parameter(rng.normal(size=(3, 4))), F.parameter(rng.normal(size=(3, 4)))
    c = F.parameter(rng.normal(size=(4, 2)))
    d = F.parameter(rng.normal(size=(2, 3, 4)))

    def f():
        x = F.add(F.mul(a, b), F.sub(a, F.neg(b)))
        y = F.matmul(x, c)
        z = F.matmul(d, c)
        return F.add(F.sum(F.mul(y, y)), F.sum(F.tanh(z)))

    rep = F.grad_check(f, {"a": a, "b": b, "c": c, "d": d})
    assert rep.passed, rep.max_rel_error


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_and_masked_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = F.parameter(rng.normal(size=(4, 5)))
    g, b = F.parameter(rng.normal(size=5)), F.parameter(rng.normal(size=5))
    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    w = rng.normal(size=(4, 5))

    def f():
        return F.sum(F.mul(F.softmax(F.layer_norm(x, g, b), axis=-1, mask=mask), w))

    rep = F.grad_check(f, {"x": x, "g": g, "b": b})
    assert rep.passed, rep.max_rel_error


def test_dropout_training_only():
    x = np.ones((50, 4))
    assert np.array_equal(F.dropout(x, 0.5, None, training=False).data, x)
    out = F.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    with pytest.raises(ContractError):
        F.dropout(x, 0.5, None, training=True)


def test_rng_determinism_and_derivation():
    a, b = F.Rng(42), F.Rng(42)
    assert np.array_equal(a.gen.random(5), b.gen.random(5))
    assert np.array_equal(a.derive(1, 2).random(3), b.derive(1, 2).random(3))
    assert not np.array_equal(a.derive(1, 2).random(3), a.derive(2, 1).random(3))
    state = a.get_state()
    first = a.gen.random(4)
    a.set_state(state)
    assert np.array_equal(first, a.gen.random(4))
