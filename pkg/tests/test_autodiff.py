"""Unit and property tests for the tape engine.

Every differentiable operation is checked against the central finite
difference oracle; the worked examples freeze hand-computed values.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from getam import autodiff as ad
from getam.autodiff import (
    DimensionError,
    TapeError,
    Tensor,
    backward,
    finite_difference_check,
)

RNG = np.random.default_rng(20240811)


def rand(*shape):
    return RNG.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)

    def test_hand_value(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[2.0], [4.0]])

    def test_zero_case(self):
        z = Tensor(np.zeros((2, 3)))
        b = Tensor(rand(3, 4))
        np.testing.assert_array_equal(ad.matmul(z, b).data, np.zeros((2, 4)))

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 4\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_gradient(self):
        b = Tensor(rand(3, 4))
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.matmul(x, b)), rand(2, 3))
        assert err < 1e-6


class TestSoftmaxRows:
    def test_symmetry(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_shift_stability(self):
        out = ad.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_hand_value(self):
        out = ad.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one(self):
        out = ad.softmax_rows(Tensor(rand(5, 7) * 10)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0)

    def test_shift_invariance(self):
        x = rand(4, 6)
        a = ad.softmax_rows(Tensor(x)).data
        b = ad.softmax_rows(Tensor(x + 37.5)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient(self):
        w = rand(3, 5)  # random projection makes the scalar depend on all rows
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.mul(ad.softmax_rows(x), Tensor(w))), rand(3, 5))
        assert err < 1e-6

    def test_conservation_gradient_is_zero(self):
        # sum of each softmax row is identically 1, so the gradient vanishes
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.softmax_rows(x)), rand(3, 4))
        assert err < 1e-2  # dominated by cancellation noise over the 1e-8 floor
        xt = Tensor(rand(3, 4), requires_grad=True)
        backward(ad.sum_all(ad.softmax_rows(xt)))
        np.testing.assert_allclose(xt.grad, 0.0, atol=1e-14)


class TestElementwise:
    def test_relu_sign_cases(self):
        out = ad.relu(Tensor([[-1.0, 0.0, 2.0]])).data
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_relu_subgradient_zero_at_zero(self):
        xt = Tensor([[0.0, 1.0]], requires_grad=True)
        backward(ad.sum_all(ad.relu(xt)))
        np.testing.assert_array_equal(xt.grad, [[0.0, 1.0]])

    def test_mul_identity(self):
        x = rand(2, 3)
        out = ad.mul(Tensor(x), Tensor(np.ones_like(x))).data
        np.testing.assert_array_equal(out, x)

    def test_power_hand_value(self):
        np.testing.assert_array_equal(ad.power(Tensor([0.5]), 2.0).data, [0.25])

    def test_dispatch_matches_direct(self):
        x = Tensor(rand(2, 2))
        np.testing.assert_array_equal(
            ad.elementwise("relu", x).data, ad.relu(x).data)
        with pytest.raises(ValueError):
            ad.elementwise("min", x, x)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    @pytest.mark.parametrize("op,extra", [
        ("add", 1.5), ("mul", -0.7), ("scale", 2.5), ("power", 3.0),
    ])
    def test_gradients_scalar_arg(self, op, extra):
        x = np.abs(rand(3, 3)) + 0.5  # keep power away from 0
        err = finite_difference_check(
            lambda t: ad.sum_all(ad.elementwise(op, t, extra)), x)
        assert err < 1e-6

    def test_gradients_tensor_args(self):
        other = Tensor(rand(3, 3))
        for op in ("add", "mul"):
            err = finite_difference_check(
                lambda t, op=op: ad.sum_all(ad.elementwise(op, t, other)),
                rand(3, 3))
            assert err < 1e-6


class TestTransformerConstituents:
    def test_layer_norm_constant_row_is_zero_pre_affine(self):
        g = Tensor(np.ones(4))
        b = Tensor(np.zeros(4))
        out = ad.layer_norm(Tensor(np.full((2, 4), 3.7)), g, b).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_mean_pool_of_identical_tokens(self):
        row = rand(1, 5)
        x = Tensor(np.repeat(row, 4, axis=0))
        np.testing.assert_allclose(ad.mean_pool(x).data, row, atol=1e-15)

    def test_gelu_fixed_point(self):
        assert ad.gelu(Tensor([[0.0]])).item() == 0.0

    def test_layer_norm_gradient(self):
        g = Tensor(rand(6), requires_grad=True)
        b = Tensor(rand(6), requires_grad=True)
        w = rand(4, 6)
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), Tensor(w))),
            rand(4, 6))
        assert err < 1e-6

    def test_layer_norm_affine_gradients(self):
        x = Tensor(rand(4, 6))
        w = rand(4, 6)
        err = finite_difference_check(
            lambda g: ad.sum_all(ad.mul(
                ad.layer_norm(x, g, Tensor(np.zeros(6))), Tensor(w))),
            rand(6))
        assert err < 1e-6

    def test_gelu_gradient(self):
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.gelu(x)), rand(3, 4))
        assert err < 1e-6

    def test_linear_gradients(self):
        w = Tensor(rand(4, 3))
        b = Tensor(rand(3))
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.linear(x, w, b)), rand(5, 4))
        assert err < 1e-6
        x = Tensor(rand(5, 4))
        err_w = finite_difference_check(
            lambda wt: ad.sum_all(ad.linear(x, wt, b)), rand(4, 3))
        assert err_w < 1e-6
        err_b = finite_difference_check(
            lambda bt: ad.sum_all(ad.power(ad.linear(x, w, bt), 2.0)), rand(3))
        assert err_b < 1e-6

    def test_mean_pool_gradient(self):
        w = rand(1, 5)
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.mul(ad.mean_pool(x), Tensor(w))), rand(4, 5))
        assert err < 1e-6


class TestStructuralOps:
    @pytest.mark.parametrize("build", [
        lambda x: ad.slice_rows(x, 1, 3),
        lambda x: ad.slice_cols(x, 0, 2),
        lambda x: ad.transpose2d(x),
        lambda x: ad.reshape(x, (2, 8)),
        lambda x: ad.concat_rows(x, Tensor(np.ones((1, 4)))),
    ])
    def test_gradients(self, build):
        w = None

        def f(x):
            out = build(x)
            return ad.sum_all(ad.power(out, 2.0))

        assert finite_difference_check(f, rand(4, 4)) < 1e-6

    def test_pick_gradient(self):
        xt = Tensor(rand(3, 3), requires_grad=True)
        backward(ad.pick(xt, (1, 2)))
        expected = np.zeros((3, 3))
        expected[1, 2] = 1.0
        np.testing.assert_array_equal(xt.grad, expected)

    def test_extract_patches_roundtrip_gradient(self):
        img = rand(3, 8, 8)
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.power(ad.extract_patches(x, 4), 2.0)), img)
        assert err < 1e-6

    def test_extract_patches_shape(self):
        out = ad.extract_patches(Tensor(rand(3, 8, 8)), 4)
        assert out.shape == (4, 48)


class TestLossOps:
    def test_bce_gradient(self):
        t = (RNG.random((2, 4)) > 0.5).astype(float)
        err = finite_difference_check(
            lambda z: ad.bce_with_logits_mean(z, t), rand(2, 4))
        assert err < 1e-6

    def test_xent_ignore_gradient(self):
        labels = np.array([0, 2, 255, 1, 255])
        err = finite_difference_check(
            lambda z: ad.softmax_xent_ignore(z, labels), rand(5, 3))
        assert err < 1e-6

    def test_xent_all_ignored_is_zero(self):
        z = Tensor(rand(4, 3), requires_grad=True)
        loss = ad.softmax_xent_ignore(z, np.full(4, 255))
        assert loss.item() == 0.0
        backward(loss)
        np.testing.assert_array_equal(z.grad, 0.0)


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        x = Tensor(rand(3, 4), requires_grad=True)
        backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        data = rand(3, 3)
        x = Tensor(data, requires_grad=True)
        backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * data, atol=1e-14)

    def test_non_scalar_root_rejected(self):
        x = Tensor(rand(2, 2), requires_grad=True)
        with pytest.raises(TapeError):
            backward(ad.mul(x, x))

    def test_stale_tape_rejected(self):
        x = Tensor(rand(2, 2), requires_grad=True)
        y = ad.mul(x, x)  # tape 1
        z = ad.mul(Tensor(rand(2, 2)), Tensor(rand(2, 2)))  # tape 2
        with pytest.raises(TapeError):
            ad.add(y, z)

    def test_accumulation_and_clear(self):
        data = rand(2, 2)
        x = Tensor(data, requires_grad=True)
        root = ad.sum_all(ad.mul(x, x))
        backward(root)
        first = x.grad.copy()
        backward(root)
        np.testing.assert_array_equal(x.grad, 2 * first)
        root.tape.clear_gradients()
        assert x.grad is None
        backward(root)
        np.testing.assert_array_equal(x.grad, first)

    def test_retained_interior_matches_leaf_rebuild(self):
        # three-node chain: x -> u = x*x -> y = sum(u * c)
        data = rand(3, 3)
        c = rand(3, 3)
        x = Tensor(data, requires_grad=True)
        u = ad.mul(x, x)
        ad.retain(u)
        backward(ad.sum_all(ad.mul(u, Tensor(c))))
        interior = u.grad.copy()

        u_leaf = Tensor(u.data, requires_grad=True)
        backward(ad.sum_all(ad.mul(u_leaf, Tensor(c))))
        np.testing.assert_array_equal(interior, u_leaf.grad)

    def test_retained_without_flow_gets_zeros(self):
        x = Tensor(rand(2, 2), requires_grad=True)
        u = ad.mul(x, x)
        ad.retain(u)
        backward(ad.sum_all(ad.mul(x, Tensor(rand(2, 2)))))  # u not on the path
        np.testing.assert_array_equal(u.grad, np.zeros((2, 2)))

    def test_clear_then_backward_bitwise_equal(self):
        data = rand(4, 4)
        w = rand(4, 4)
        x = Tensor(data, requires_grad=True)
        y = ad.sum_all(ad.gelu(ad.mul(ad.softmax_rows(x), Tensor(w))))
        backward(y)
        first = x.grad.copy()
        y.tape.clear_gradients()
        backward(y)
        assert np.array_equal(first, x.grad)

    def test_composed_graph_fd(self):
        w1 = Tensor(rand(4, 6))
        w2 = Tensor(rand(6, 1))

        def f(x):
            h = ad.gelu(ad.matmul(x, w1))
            h = ad.softmax_rows(h)
            return ad.sum_all(ad.power(ad.matmul(h, w2), 2.0))

        assert finite_difference_check(f, rand(3, 4)) < 1e-6


class TestFiniteDifferenceCheck:
    def test_sum_is_exact(self):
        assert finite_difference_check(ad.sum_all, rand(3, 3)) < 1e-9

    def test_coordinate_subset(self):
        err = finite_difference_check(
            lambda x: ad.sum_all(ad.gelu(x)), rand(4, 4),
            coords=[(0, 0), (3, 3)])
        assert err < 1e-6

    def test_rejects_non_scalar(self):
        with pytest.raises(TapeError):
            finite_difference_check(lambda x: ad.mul(x, x), rand(2, 2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_row_properties(row):
    out = ad.softmax_rows(Tensor([row])).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)
