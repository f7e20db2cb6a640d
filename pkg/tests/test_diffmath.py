"""Finite-difference and reference checks for the gradient engine."""

import numpy as np
import pytest

from dotengine import diffmath as dm

EPS = 1e-6


def numeric_grad(build_loss, value):
    """Central finite differences of a scalar loss w.r.t. one array input."""
    value = np.asarray(value, dtype=np.float64)
    grad = np.zeros_like(value)
    it = np.nditer(value, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = value.copy()
        bumped[idx] += EPS
        hi = build_loss(bumped)
        bumped[idx] -= 2 * EPS
        lo = build_loss(bumped)
        grad[idx] = (hi - lo) / (2 * EPS)
        it.iternext()
    return grad


def check_unary(op, x, tol=1e-6):
    t = dm.parameter(x, name="x")
    loss = dm.tensor_sum(dm.mul(op(t), dm.constant(np.cos(x) + 2.0)))
    grads = dm.backward(loss)

    def f(v):
        return float(
            dm.tensor_sum(dm.mul(op(dm.constant(v)), dm.constant(np.cos(x) + 2.0))).data
        )

    np.testing.assert_allclose(grads[t], numeric_grad(f, x), rtol=tol, atol=tol)


class TestElementwiseGrads:
    def test_add_sub_mul_div(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4)) + 3.0  # keep divisors away from zero
        for op in (dm.add, dm.sub, dm.mul, dm.div):
            ta, tb = dm.parameter(a), dm.parameter(b)
            loss = dm.tensor_sum(op(ta, tb))
            grads = dm.backward(loss)
            fa = lambda v: float(dm.tensor_sum(op(dm.constant(v), dm.constant(b))).data)
            fb = lambda v: float(dm.tensor_sum(op(dm.constant(a), dm.constant(v))).data)
            np.testing.assert_allclose(grads[ta], numeric_grad(fa, a), atol=1e-6)
            np.testing.assert_allclose(grads[tb], numeric_grad(fb, b), atol=1e-6)

    def test_broadcast_row_bias(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 3))
        bias = rng.standard_normal(3)
        tb = dm.parameter(bias)
        loss = dm.tensor_sum(dm.mul(dm.add(dm.constant(x), tb), dm.constant(x + 1)))
        grads = dm.backward(loss)
        f = lambda v: float(np.sum((x + v) * (x + 1)))
        np.testing.assert_allclose(grads[tb], numeric_grad(f, bias), atol=1e-6)

    def test_exp_log_sqrt(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.5, 2.0, size=(4, 2))
        check_unary(dm.exp, x)
        check_unary(dm.log, x)
        check_unary(dm.sqrt, x)

    def test_relu_and_subgradient_at_zero(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        t = dm.parameter(x)
        loss = dm.tensor_sum(dm.relu(t))
        grads = dm.backward(loss)
        np.testing.assert_array_equal(grads[t], [[0.0, 0.0, 1.0]])

    def test_gelu_matches_reference(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 3))
        check_unary(dm.gelu, x, tol=1e-5)
        from math import erf

        ref = x * 0.5 * (1 + np.vectorize(erf)(x / np.sqrt(2)))
        np.testing.assert_allclose(dm.gelu(dm.constant(x)).data, ref, atol=1e-12)

    def test_scale_and_neg(self):
        x = np.arange(6.0).reshape(2, 3)
        t = dm.parameter(x)
        loss = dm.tensor_sum(dm.neg(dm.scale(t, 2.5)))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[t], np.full((2, 3), -2.5))


class TestMatrixOps:
    def test_matmul_grads(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))
        ta, tb = dm.parameter(a), dm.parameter(b)
        loss = dm.tensor_sum(dm.mul(dm.matmul(ta, tb), dm.constant(w)))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[ta], w @ b.T, atol=1e-12)
        np.testing.assert_allclose(grads[tb], a.T @ w, atol=1e-12)

    def test_matmul_shape_error(self):
        with pytest.raises(dm.ShapeError):
            dm.matmul(dm.constant(np.ones((2, 3))), dm.constant(np.ones((2, 3))))

    def test_transpose(self):
        x = np.arange(6.0).reshape(2, 3)
        t = dm.parameter(x)
        loss = dm.tensor_sum(dm.mul(dm.transpose(t), dm.constant(np.ones((3, 2)) * 2)))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[t], np.full((2, 3), 2.0))

    def test_slice_and_concat_cols(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 6))
        t = dm.parameter(x)
        parts = [dm.slice_cols(t, 0, 3), dm.slice_cols(t, 3, 6)]
        back = dm.concat_cols(parts)
        loss = dm.tensor_sum(dm.mul(back, dm.constant(x)))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[t], x, atol=1e-12)

    def test_concat_rows(self):
        a = dm.parameter(np.ones((2, 3)))
        b = dm.parameter(np.full((1, 3), 2.0))
        out = dm.concat_rows([a, b])
        assert out.data.shape == (3, 3)
        loss = dm.tensor_sum(dm.scale(out, 3.0))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[a], np.full((2, 3), 3.0))
        np.testing.assert_allclose(grads[b], np.full((1, 3), 3.0))

    def test_gather_rows(self):
        x = np.arange(12.0).reshape(3, 4)
        t = dm.parameter(x)
        picked = dm.gather_rows(t, [1, 0, 3])
        np.testing.assert_array_equal(picked.data.ravel(), [1.0, 4.0, 11.0])
        grads = dm.backward(dm.tensor_sum(picked))
        expected = np.zeros((3, 4))
        expected[[0, 1, 2], [1, 0, 3]] = 1.0
        np.testing.assert_array_equal(grads[t], expected)


class TestReductions:
    def test_softmax_rows_against_numeric(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((4, 5))
        t = dm.parameter(x)
        loss = dm.tensor_sum(dm.mul(dm.softmax_rows(t), dm.constant(w)))
        grads = dm.backward(loss)

        def f(v):
            e = np.exp(v - v.max(axis=1, keepdims=True))
            return float(np.sum(e / e.sum(axis=1, keepdims=True) * w))

        np.testing.assert_allclose(grads[t], numeric_grad(f, x), atol=1e-6)

    def test_logsumexp_rows_stable_and_correct(self):
        x = np.array([[1000.0, 1000.0], [0.0, -1000.0]])
        out = dm.logsumexp_rows(dm.constant(x))
        np.testing.assert_allclose(out.data[0, 0], 1000.0 + np.log(2.0))
        np.testing.assert_allclose(out.data[1, 0], np.log(1 + np.exp(-1000.0)))

    def test_logsumexp_grad(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4))
        t = dm.parameter(x)
        grads = dm.backward(dm.tensor_sum(dm.logsumexp_rows(t)))
        e = np.exp(x - x.max(axis=1, keepdims=True))
        np.testing.assert_allclose(grads[t], e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_tensor_sum_axis(self):
        x = np.arange(6.0).reshape(2, 3)
        t = dm.parameter(x)
        col = dm.tensor_sum(t, axis=1, keepdims=True)
        assert col.data.shape == (2, 1)
        loss = dm.tensor_sum(dm.mul(col, dm.constant(np.array([[2.0], [3.0]]))))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[t], [[2, 2, 2], [3, 3, 3]])


class TestGraphMechanics:
    def test_shared_subexpression_accumulates(self):
        # y = x*x reused twice: dL/dx must sum both paths
        x = dm.parameter(np.array([[3.0]]))
        y = dm.mul(x, x)
        loss = dm.tensor_sum(dm.add(y, y))
        grads = dm.backward(loss)
        np.testing.assert_allclose(grads[x], [[12.0]])

    def test_backward_twice_accumulates_on_leaf(self):
        x = dm.parameter(np.array([[2.0]]))
        loss = dm.tensor_sum(dm.mul(x, dm.constant(np.array([[5.0]]))))
        dm.backward(loss)
        dm.backward(loss)
        np.testing.assert_allclose(x.grad, [[10.0]])
        dm.zero_grads([x])
        assert x.grad is None

    def test_disconnected_leaf_absent(self):
        x = dm.parameter(np.ones((1, 1)))
        z = dm.parameter(np.ones((1, 1)))
        grads = dm.backward(dm.tensor_sum(dm.scale(x, 2.0)))
        assert z not in grads

    def test_scalar_loss_required(self):
        x = dm.parameter(np.ones((2, 2)))
        with pytest.raises(dm.ContractError):
            dm.backward(dm.add(x, x))

    def test_deep_chain_no_recursion_limit(self):
        x = dm.parameter(np.array([[1.0]]))
        node = x
        for _ in range(5000):
            node = dm.add(node, dm.constant(np.array([[0.0]])))
        grads = dm.backward(dm.tensor_sum(node))
        np.testing.assert_allclose(grads[x], [[1.0]])


class TestDomainsAndDispatch:
    def test_log_requires_positive(self):
        with pytest.raises(dm.DomainError):
            dm.log(dm.constant(np.array([[0.0]])))

    def test_sqrt_requires_nonnegative(self):
        with pytest.raises(dm.DomainError):
            dm.sqrt(dm.constant(np.array([[-1.0]])))

    def test_elementwise_dispatch(self):
        x = dm.constant(np.array([[1.0, 4.0]]))
        np.testing.assert_allclose(dm.elementwise("sqrt", x).data, [[1.0, 2.0]])
        y = dm.elementwise("add", x, x)
        np.testing.assert_allclose(y.data, [[2.0, 8.0]])
        with pytest.raises(dm.ContractError):
            dm.elementwise("nope", x)
        with pytest.raises(dm.ContractError):
            dm.elementwise("add", x)
        with pytest.raises(dm.ContractError):
            dm.elementwise("relu", x, x)

    def test_operator_sugar(self):
        a = dm.constant(np.array([[2.0]]))
        b = dm.constant(np.array([[3.0]]))
        np.testing.assert_allclose((a + b).data, [[5.0]])
        np.testing.assert_allclose((a - b).data, [[-1.0]])
        np.testing.assert_allclose((a * b).data, [[6.0]])
        np.testing.assert_allclose((a / b).data, [[2.0 / 3.0]])
        np.testing.assert_allclose((-a).data, [[-2.0]])
        np.testing.assert_allclose((a @ b).data, [[6.0]])
