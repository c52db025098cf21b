import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsoda import tensor as T
from fedsoda.tensor import NumericError, ShapeError, Tensor

from conftest import central_diff, rel_err


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def check_grads(loss_fn, params, rng, count=6, tol=1e-6):
    T.zero_grad(params)
    loss = loss_fn()
    T.backward(loss)
    for p in params:
        for _ in range(count):
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            num = central_diff(lambda: loss_fn().item(), p.data, idx)
            assert rel_err(p.grad[idx], num) < tol or abs(p.grad[idx] - num) < 1e-9, (p.shape, idx)


def test_add_broadcast_bias_grad():
    rng = np.random.default_rng(0)
    x, b = leaf(rng, 3, 4, 5), leaf(rng, 5)
    check_grads(lambda: T.sq_sum(x + b), [x, b], rng)


def test_mul_sub_scale_grads():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
    check_grads(lambda: T.sq_sum((a * b - a) * 0.7), [a, b], rng)


def test_gelu_matches_formula_and_grad():
    rng = np.random.default_rng(2)
    x = leaf(rng, 7, 3, scale=2.0)
    k = math.sqrt(2 / math.pi)
    want = 0.5 * x.data * (1 + np.tanh(k * (x.data + 0.044715 * x.data**3)))
    np.testing.assert_allclose(T.gelu(x).data, want, rtol=1e-14, atol=1e-15)
    check_grads(lambda: T.tsum(T.gelu(x)), [x], rng)


def test_matmul_grads_shared_and_batched():
    rng = np.random.default_rng(3)
    a, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    check_grads(lambda: T.sq_sum(a @ w), [a, w], rng)
    c, d = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
    check_grads(lambda: T.sq_sum(T.matmul(c, d)), [c, d], rng)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_reshape_transpose_grads():
    rng = np.random.default_rng(4)
    x = leaf(rng, 2, 3, 4)
    w = Tensor(rng.normal(size=(2, 4, 3)))
    check_grads(lambda: T.dot(T.transpose(x, (0, 2, 1)), w), [x], rng)
    check_grads(lambda: T.sq_sum(T.reshape(x, (6, 4)) @ Tensor(np.ones((4, 1)))), [x], rng)


def test_embedding_scatter_accumulates_repeats():
    w = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = T.embedding(w, np.array([[1, 1, 3]]))
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(w.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])
    with pytest.raises(IndexError):
        T.embedding(w, np.array([4]))


def test_causal_softmax_rows_and_mask():
    rng = np.random.default_rng(5)
    s = leaf(rng, 2, 4, 4)
    p = T.causal_softmax(s).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-15)
    assert np.all(np.triu(p[0], 1) == 0)
    w = Tensor(rng.normal(size=(2, 4, 4)))
    check_grads(lambda: T.dot(T.causal_softmax(s), w), [s], rng)


def test_softmax_rows_grad():
    rng = np.random.default_rng(6)
    s = leaf(rng, 3, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    check_grads(lambda: T.dot(T.softmax_rows(s), w), [s], rng)


def test_layer_norm_values_and_grads():
    rng = np.random.default_rng(7)
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    y = T.layer_norm(x, g, b).data
    xn = (x.data - x.data.mean(-1, keepdims=True)) / np.sqrt(x.data.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(y, xn * g.data + b.data, rtol=1e-12)
    w = Tensor(rng.normal(size=(2, 3, 6)))
    check_grads(lambda: T.dot(T.layer_norm(x, g, b), w), [x, g, b], rng)


def test_cross_entropy_value_ignore_and_grad():
    rng = np.random.default_rng(8)
    z = leaf(rng, 2, 3, 5)
    t = np.array([[1, -1, 4], [0, 2, -1]])
    loss = T.cross_entropy(z, t)
    rows = z.data.reshape(-1, 5)
    flat = t.reshape(-1)
    want = np.mean([-(rows[i, flat[i]] - np.log(np.exp(rows[i]).sum())) for i in range(6) if flat[i] >= 0])
    assert abs(loss.item() - want) < 1e-13
    check_grads(lambda: T.cross_entropy(z, t), [z], rng)
    with pytest.raises(IndexError):
        T.cross_entropy(z, np.full((2, 3), 5))


def test_kl_divergence_oracle_mask_and_grad():
    rng = np.random.default_rng(9)
    tgt = rng.normal(size=(4, 6))
    z = leaf(rng, 4, 6)
    mask = np.array([True, False, True, True])
    got = T.kl_divergence(tgt, z, mask).item()
    mpmath.mp.dps = 40
    acc = []
    for i in np.nonzero(mask)[0]:
        p = [mpmath.e ** mpmath.mpf(v) for v in tgt[i]]
        q = [mpmath.e ** mpmath.mpf(v) for v in z.data[i]]
        sp, sq = sum(p), sum(q)
        acc.append(sum((a / sp) * mpmath.log((a / sp) / (b / sq)) for a, b in zip(p, q)))
    want = float(sum(acc) / len(acc))
    assert abs(got - want) <= 1e-10
    check_grads(lambda: T.kl_divergence(tgt, z, mask), [z], rng)


def test_kl_identical_is_zero():
    x = np.random.default_rng(10).normal(size=(3, 8))
    assert T.kl_divergence(x, Tensor(x.copy())).item() == 0.0


def test_backward_requires_scalar_and_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)
    y = T.tsum(x * 2.0) + T.tsum(x)
    T.backward(y)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0, 3.0])


def test_frozen_leaves_get_no_grad():
    w = Tensor(np.ones((2, 2)))
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    T.backward(T.tsum(x @ w))
    assert w.grad is None and x.grad is not None


def test_nan_raises_numeric_error():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.nan]))
    x = Tensor(np.array([1e308]), requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        x * 1e10


def test_trailing_broadcast_only():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
def test_matmul_linear_in_grad_seed(a, b):
    A, B = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.backward(T.tsum(A @ B))
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(B.grad, a.T @ np.ones((3, 2)), atol=1e-12)
