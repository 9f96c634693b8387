"""Autodiff substrate tests.

Backward rules are checked against central finite differences computed in
the tests themselves, plus closed-form identities where they exist.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf
from scipy.special import logsumexp as scipy_logsumexp
from scipy.special import softmax as scipy_softmax

from tmeg.autodiff import (
    Tensor, concat, embed_lookup, layer_norm, linear, logsumexp, softmax,
)


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_op(build, *shapes, seed=0, tol=1e-6):
    """Compare analytic and numeric gradients of a scalar-valued op."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(0.0, 1.0, size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: float(build(
            *[Tensor(x) for x in arrays]).data), a)
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


class TestElementwiseGrads:

    def test_add_mul_chain(self):
        check_op(lambda a, b: ((a + b) * a).sum(), (3, 4), (3, 4))

    def test_broadcast_add(self):
        check_op(lambda a, b: (a + b).sum(), (3, 4), (4,))

    def test_broadcast_mul(self):
        check_op(lambda a, b: (a * b).sum(), (2, 3, 4), (1, 4))

    def test_sub_neg(self):
        check_op(lambda a, b: (a - b * 2.0).sum(), (5,), (5,))

    def test_division(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.5, 2.0, size=(3, 3))
        b = rng.uniform(0.5, 2.0, size=(3, 3))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        (ta / tb).sum().backward()
        np.testing.assert_allclose(ta.grad, 1.0 / b, rtol=1e-12)
        np.testing.assert_allclose(tb.grad, -a / b ** 2, rtol=1e-12)

    def test_pow(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0.5, 2.0, size=(4,))
        t = Tensor(a, requires_grad=True)
        (t ** 3.0).sum().backward()
        np.testing.assert_allclose(t.grad, 3.0 * a ** 2, rtol=1e-12)

    def test_exp_log_sqrt_tanh(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0.5, 1.5, size=(6,))
        for build in (lambda t: t.exp().sum(), lambda t: t.log().sum(),
                      lambda t: t.sqrt().sum(), lambda t: t.tanh().sum()):
            t = Tensor(a.copy(), requires_grad=True)
            build(t).backward()
            num = numeric_grad(lambda: float(build(Tensor(a)).data), a)
            np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-8)

    def test_gelu_matches_definition(self):
        x = np.linspace(-3.0, 3.0, 13)
        out = Tensor(x).gelu()
        expected = x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        np.testing.assert_allclose(out.data, expected, rtol=1e-14)

    def test_gelu_grad(self):
        check_op(lambda a: a.gelu().sum(), (9,), tol=1e-6)


class TestMatmulAndShapes:

    def test_matmul_2d(self):
        check_op(lambda a, b: (a @ b).sum(), (3, 4), (4, 2))

    def test_matmul_batched(self):
        check_op(lambda a, b: (a @ b).sum(), (2, 3, 4), (2, 4, 5))

    def test_matmul_broadcast_weight(self):
        check_op(lambda a, b: (a @ b).sum(), (2, 3, 4), (4, 5))

    def test_getitem_slice(self):
        check_op(lambda a: (a[1:, :2] * a[1:, :2]).sum(), (4, 3))

    def test_getitem_repeated_fancy_index_accumulates(self):
        a = Tensor(np.arange(4.0), requires_grad=True)
        picked = a[np.array([1, 1, 2])]
        picked.sum().backward()
        np.testing.assert_array_equal(a.grad, [0.0, 2.0, 1.0, 0.0])

    def test_reshape_and_swapaxes(self):
        check_op(lambda a: (a.reshape(6, 2).T @ a.reshape(6, 2)).sum(), (3, 4))

    def test_reshape_accepts_tuple(self):
        t = Tensor(np.zeros((2, 3)), requires_grad=True)
        assert t.reshape((3, 2)).shape == (3, 2)
        assert t.reshape(3, 2).shape == (3, 2)

    def test_concat_grads(self):
        check_op(lambda a, b: (concat([a, b], axis=1) ** 2.0).sum(),
                 (2, 3), (2, 2))

    def test_sum_axis_keepdims(self):
        check_op(lambda a: (a.sum(axis=1, keepdims=True) * a).sum(), (3, 4))

    def test_mean(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        a.mean().backward()
        np.testing.assert_allclose(a.grad, np.full((2, 3), 1.0 / 6.0))


class TestComposedOps:

    def test_softmax_matches_scipy(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(softmax(Tensor(x), axis=-1).data,
                                   scipy_softmax(x, axis=-1), rtol=1e-12)
        np.testing.assert_allclose(softmax(Tensor(x), axis=0).data,
                                   scipy_softmax(x, axis=0), rtol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        s = softmax(Tensor(rng.normal(size=(6, 7)) * 50.0), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(6), rtol=1e-12)

    def test_softmax_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(softmax(Tensor(x)).data,
                                   softmax(Tensor(x + 100.0)).data, rtol=1e-12)

    def test_softmax_rejects_nan(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.array([np.nan, 0.0])))

    def test_softmax_grad(self):
        check_op(lambda a: (softmax(a, axis=-1) ** 2.0).sum(), (3, 4))

    def test_logsumexp_matches_scipy(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 6)) * 30.0
        np.testing.assert_allclose(logsumexp(Tensor(x), axis=-1).data,
                                   scipy_logsumexp(x, axis=-1), rtol=1e-12)

    def test_logsumexp_keepdims_and_1d(self):
        x = np.array([0.0, 1.0, 2.0])
        out = logsumexp(Tensor(x), axis=-1)
        assert out.shape == ()
        kept = logsumexp(Tensor(x.reshape(1, 3)), axis=-1, keepdims=True)
        assert kept.shape == (1, 1)

    def test_logsumexp_grad_is_softmax(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5,))
        t = Tensor(x, requires_grad=True)
        logsumexp(t, axis=-1).backward()
        np.testing.assert_allclose(t.grad, scipy_softmax(x), rtol=1e-10)

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.normal(2.0, 3.0, size=(4, 8))
        out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(4),
                                   atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), np.ones(4),
                                   rtol=1e-6)

    def test_layer_norm_grad(self):
        check_op(lambda x, g, b: (layer_norm(x, g, b) ** 2.0).sum(),
                 (3, 5), (5,), (5,), tol=1e-5)

    def test_linear_shape_check(self):
        with pytest.raises(ValueError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_linear_grad(self):
        check_op(lambda x, w, b: (linear(x, w, b) ** 2.0).sum(),
                 (4, 3), (3, 2), (2,))

    def test_embed_lookup_range_check(self):
        table = Tensor(np.zeros((3, 2)))
        with pytest.raises(IndexError):
            embed_lookup(table, np.array([3]))

    def test_embed_lookup_accumulates(self):
        table = Tensor(np.eye(3), requires_grad=True)
        embed_lookup(table, np.array([0, 0, 2])).sum().backward()
        # row 0 is looked up twice, row 2 once; each row has 3 columns
        np.testing.assert_array_equal(table.grad.sum(axis=1), [6.0, 0.0, 3.0])


class TestGraphMechanics:

    def test_backward_requires_scalar(self):
        t = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            t.backward()

    def test_detach_blocks_gradient(self):
        t = Tensor(np.ones(3), requires_grad=True)
        (t.detach() * t).sum().backward()
        np.testing.assert_array_equal(t.grad, np.ones(3))

    def test_shared_subexpression_accumulates(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        y = t * t + t
        y.sum().backward()
        np.testing.assert_allclose(t.grad, [5.0])

    def test_deep_chain_is_iterative(self):
        # long chains would overflow a recursive backward implementation
        t = Tensor(np.array([1.0]), requires_grad=True)
        x = t
        for _ in range(5000):
            x = x + 1.0
        x.sum().backward()
        np.testing.assert_allclose(t.grad, [1.0])

    def test_constant_tensors_track_nothing(self):
        out = Tensor(np.ones(3)) * Tensor(np.ones(3))
        assert not out.requires_grad
        assert out._parents == ()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_bilinear_grad_identity(n, m, seed):
    """For f = u^T A v the gradient of A is the outer product u v^T."""
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=n), rng.normal(size=m)
    a = Tensor(rng.normal(size=(n, m)), requires_grad=True)
    out = (Tensor(u).reshape(1, n) @ a @ Tensor(v).reshape(m, 1))
    out.sum().backward()
    np.testing.assert_allclose(a.grad, np.outer(u, v), rtol=1e-10, atol=1e-10)
