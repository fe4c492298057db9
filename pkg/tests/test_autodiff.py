"""Finite-difference oracles for every primitive op in the autodiff engine."""

import numpy as np
import pytest

from evseq.autodiff import (Tensor, as_tensor, clamp_min, concat, exp,
                            l2_normalize, log, logsumexp, matmul, powc, relu,
                            reshape, sigmoid, sqrt, take, tanh, tmean,
                            transpose, tsum)


def numeric_grad(fn, x, h=1e-6):
    """Central differences of a scalar-valued fn w.r.t. the array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn()
        flat[i] = keep - h
        fm = fn()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_unary(op, x, scalar_of=lambda y: tsum(y * y)):
    t = Tensor(x, requires_grad=True)
    loss = scalar_of(op(t))
    loss.backward()

    def f():
        return float(scalar_of(op(Tensor(x))).data)

    num = numeric_grad(f, x)
    np.testing.assert_allclose(t.grad, num, rtol=1e-5, atol=1e-8)


rng = np.random.default_rng(42)


@pytest.mark.parametrize("op", [exp, tanh, sigmoid, lambda a: log(a + 3.0),
                                lambda a: sqrt(a + 3.0), lambda a: powc(a, 3.0),
                                relu, lambda a: clamp_min(a, 0.1),
                                lambda a: a * a + 2.0 * a - 1.0,
                                lambda a: 1.0 / (a + 3.0), l2_normalize])
def test_elementwise_grads(op):
    check_unary(op, rng.normal(size=(3, 4)))


def test_add_mul_broadcast():
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    loss = tsum((a * b + b) * (a * b + b))
    loss.backward()

    def f(which):
        def inner():
            ta, tb = Tensor(a.data), Tensor(b.data)
            return float(tsum((ta * tb + tb) * (ta * tb + tb)).data)
        return inner

    np.testing.assert_allclose(a.grad, numeric_grad(f("a"), a.data), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(b.grad, numeric_grad(f("b"), b.data), rtol=1e-5, atol=1e-8)


def test_matmul_grad():
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    tsum(matmul(a, b) * matmul(a, b)).backward()
    fa = lambda: float(tsum(matmul(Tensor(a.data), Tensor(b.data))
                            * matmul(Tensor(a.data), Tensor(b.data))).data)
    np.testing.assert_allclose(a.grad, numeric_grad(fa, a.data), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(b.grad, numeric_grad(fa, b.data), rtol=1e-5, atol=1e-8)


def test_reductions_and_shapes():
    x = rng.normal(size=(3, 4))
    for op in (lambda a: tsum(a, axis=0), lambda a: tsum(a, axis=1, keepdims=True),
               lambda a: tmean(a, axis=1), lambda a: transpose(a),
               lambda a: reshape(a, (2, 6)), lambda a: logsumexp(a, axis=1)):
        check_unary(op, x.copy())


def test_concat_and_take():
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    y = concat([a, b], axis=1)
    tsum(y * y).backward()
    np.testing.assert_allclose(a.grad, 2 * a.data)
    np.testing.assert_allclose(b.grad, 2 * b.data)

    # repeated indices must accumulate in the scatter
    t = Tensor(np.arange(4.0), requires_grad=True)
    take(t, np.array([1, 1, 3])).backward(np.ones(3))
    np.testing.assert_array_equal(t.grad, [0.0, 2.0, 0.0, 1.0])

    # tuple indexing over a 3-d tensor
    t3 = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    picked = take(t3, (np.array([0, 1]), np.array([2, 0])))
    assert picked.shape == (2, 4)
    tsum(picked * picked).backward()
    assert np.count_nonzero(t3.grad) == 8


def test_logsumexp_matches_reference():
    x = rng.normal(size=(5, 7)) * 10
    got = logsumexp(Tensor(x), axis=1).data
    want = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_l2_normalize_unit_rows_and_zero_safety():
    x = rng.normal(size=(4, 3))
    n = l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, rtol=1e-12)
    z = l2_normalize(Tensor(np.zeros((1, 3)))).data
    assert np.all(np.isfinite(z))


def test_backward_accumulates_and_zero_grad_resets():
    t = Tensor(np.ones(3), requires_grad=True)
    tsum(t * t).backward()
    tsum(t * t).backward()
    np.testing.assert_allclose(t.grad, 4.0 * np.ones(3))
    t.zero_grad()
    assert t.grad is None


def test_graph_reuse_single_backward():
    # diamond-shaped graph: y feeds the loss twice
    t = Tensor(np.array([2.0]), requires_grad=True)
    y = t * 3.0
    loss = tsum(y * y + y)
    loss.backward()
    np.testing.assert_allclose(t.grad, [3 * (2 * 6.0) + 3.0])


def test_detach_blocks_gradient():
    t = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(t.detach() * t)
    loss.backward()
    np.testing.assert_allclose(t.grad, np.ones(3))


def test_as_tensor_passthrough():
    t = Tensor(np.ones(2))
    assert as_tensor(t) is t
    assert isinstance(as_tensor([1.0, 2.0]), Tensor)
