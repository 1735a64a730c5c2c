import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dpseq.gradcheck import check_gradients
from dpseq.tensor import (ShapeError, Tape, Tensor, activations, add, backward, concat, dropout,
                          ew_and_matmul, gelu, layer_norm, linear, log_softmax, matmul, mul, pick,
                          relu, sigmoid, softmax, stack, sub, tanh)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_identity_matmul_returns_vector():
    x = np.array([3.5, -1.25])
    out = ew_and_matmul(Tensor(np.eye(2)), Tensor(x), "matmul")
    np.testing.assert_array_equal(out.numpy(), x)


def test_add_example():
    np.testing.assert_array_equal(ew_and_matmul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), "add").numpy(), [4, 6])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop_exactly(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(-9, 10, size=(2, 3)).astype(float)
    b = rng.integers(-9, 10, size=(3, 2)).astype(float)
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).numpy(), triple_loop(a, b))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        ew_and_matmul(Tensor([1.0]), Tensor([1.0]), "div")


def test_trailing_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert add(a, Tensor(np.ones(3))).shape == (2, 3)
    with pytest.raises(ShapeError):
        add(a, Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_activation_examples():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).numpy(), [0.5, 0.5])
    assert abs(tanh(Tensor(0.1)).item() - 0.099668) < 5e-7
    assert abs(tanh(Tensor(0.1)).item() - math.tanh(0.1)) < 1e-15
    np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).numpy(), [0.0, 2.0])
    assert activations(Tensor(0.0), "sigmoid").item() == 0.5
    with pytest.raises(ValueError):
        activations(Tensor(0.0), "swish")


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(Tensor([-800.0, 800.0])).numpy()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 17)
    ref = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    np.testing.assert_allclose(gelu(Tensor(x)).numpy(), ref, rtol=0, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    s = softmax(Tensor(x)).numpy()
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(log_softmax(Tensor(x)).numpy(), np.log(s), atol=1e-6)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor(np.full(4, 3.7)), one, zero).numpy(), np.zeros(4))
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).numpy()
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-10)


def test_layer_norm_direct_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(size=4)
    g, b = rng.normal(size=4), rng.normal(size=4)
    mu = sum(x) / 4
    var = sum((v - mu) ** 2 for v in x) / 4
    ref = [(v - mu) / math.sqrt(var + 1e-6) * gg + bb for v, gg, bb in zip(x, g, b)]
    np.testing.assert_allclose(layer_norm(Tensor(x), Tensor(g), Tensor(b)).numpy(), ref, atol=1e-12)


def test_backward_sum_wx():
    x = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.array([0.3, 0.1, -0.7]), requires_grad=True)
    with Tape() as tape:
        loss = (w * Tensor(x)).sum()
    np.testing.assert_array_equal(backward(loss, tape)[w], x)


def test_backward_sigmoid_at_zero():
    c = np.array([2.0, -3.0])
    w = Tensor(np.zeros(2), requires_grad=True)
    with Tape() as tape:
        loss = (sigmoid(w) * Tensor(c)).sum()
    np.testing.assert_array_equal(tape.backward(loss)[w], 0.25 * c)


def test_backward_rejects_nonscalar_and_foreign_loss():
    w = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        v = w * 2.0
    with pytest.raises(ValueError):
        tape.backward(v)
    with Tape() as other:
        loss = (w * 3.0).sum()
    with pytest.raises(ValueError):
        tape.backward(loss)
    assert w in other.backward(loss)


def test_no_recording_without_requires_grad():
    with Tape() as tape:
        (Tensor(np.ones(3)) * 2.0).sum()
    assert len(tape) == 0


def test_gradients_accumulate_over_reuse():
    w = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (w * w + w).sum()
    np.testing.assert_allclose(tape.backward(loss)[w], [5.0])


def _ops(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=4), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    bm = Tensor(rng.normal(size=(2, 4, 2)), requires_grad=True)
    g = Tensor(rng.normal(size=4) + 1.0, requires_grad=True)
    be = Tensor(rng.normal(size=4), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    wl = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    bl = Tensor(rng.normal(size=2), requires_grad=True)
    proj = Tensor(rng.normal(size=(3, 4)))
    labels = rng.integers(0, 4, size=3)
    rate_rng = lambda: np.random.default_rng(7)  # noqa: E731
    return {
        "add": (lambda: (add(a, v) * proj).sum(), [a, v]),
        "sub": (lambda: (sub(a, b) * proj).sum(), [a, b]),
        "mul": (lambda: (mul(a, b) * proj).sum(), [a, b]),
        "mul_bcast": (lambda: (mul(a, v) * proj).sum(), [a, v]),
        "matmul": (lambda: (matmul(a, m) * Tensor(np.arange(6.0).reshape(3, 2))).sum(), [a, m]),
        "matvec": (lambda: (matmul(a, v) * Tensor(np.arange(3.0))).sum(), [a, v]),
        "batched_matmul": (lambda: matmul(Tensor(np.ones((2, 3, 4))) * 0.5 + stack([a, b]), bm).sum(), [a, b, bm]),
        "linear": (lambda: (linear(a, wl, bl) * Tensor(np.arange(6.0).reshape(3, 2))).sum(), [a, wl, bl]),
        "sigmoid": (lambda: (sigmoid(a) * proj).sum(), [a]),
        "tanh": (lambda: (tanh(a) * proj).sum(), [a]),
        "gelu": (lambda: (gelu(a) * proj).sum(), [a]),
        "softmax": (lambda: (softmax(a) * proj).sum(), [a]),
        "log_softmax": (lambda: (log_softmax(a) * proj).sum(), [a]),
        "layer_norm": (lambda: (layer_norm(a, g, be) * proj).sum(), [a, g, be]),
        "exp_log": (lambda: (pos.log() * proj + (a * 0.1).exp()).sum(), [pos, a]),
        "mean": (lambda: (a.mean(axis=0) * v).sum() + a.mean(), [a, v]),
        "reshape_transpose": (lambda: (a.reshape(4, 3).T * proj).sum(), [a]),
        "flip_getitem": (lambda: (a.flip(0)[1:, ::2] * proj[:2, :2]).sum(), [a]),
        "concat": (lambda: (concat([a, b], axis=-1) * Tensor(np.arange(24.0).reshape(3, 8))).sum(), [a, b]),
        "pick": (lambda: pick(log_softmax(a), labels).sum(), [a]),
        "dropout": (lambda: (dropout(a, 0.3, rate_rng()) * proj).sum(), [a]),
    }


OP_NAMES = list(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients_vs_finite_differences(name):
    worst = 0.0
    for seed in range(10):
        fn, params = _ops(np.random.default_rng(seed))[name]
        res = check_gradients(fn, {str(i): p for i, p in enumerate(params)})
        worst = max(worst, max(v[0] for v in res.values()))
    assert worst < 1e-4


def test_relu_gradient_away_from_kink():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = relu(x).sum()
    np.testing.assert_array_equal(tape.backward(loss)[x], [0.0, 1.0, 1.0])


def test_dropout_identity_without_rng_and_rescales_with():
    x = Tensor(np.ones(1000))
    np.testing.assert_array_equal(dropout(x, 0.5, None).numpy(), x.numpy())
    out = dropout(x, 0.5, np.random.default_rng(0)).numpy()
    assert set(np.unique(out)) <= {0.0, 2.0}
