import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv2d_loops, max_pool_loops
from scse import tensor as T
from scse.gradcheck import LAYER_PROBLEMS, BLOCK_TOL, gradcheck_block
from scse.tensor import ShapeError, Tensor, backward, finite_diff_gradient


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_and_bias(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        out = T.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), padding=1)
        assert out.shape == (2, 4, 5, 5)
        assert not out.data.any()

    def test_matches_nested_loops(self, rng):
        x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, 1, 1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_instances(self, seed):
        r = np.random.default_rng(seed)
        n, cin, cout = (int(v) for v in r.integers(1, 5, size=3))
        k = int(r.choice([1, 3, 5]))
        stride = int(r.choice([1, 2]))
        pad = int(r.integers(0, k // 2 + 1))
        out_h = int(r.integers(2, 6))
        h = (out_h - 1) * stride + k - 2 * pad
        x, w = r.standard_normal((n, cin, h, h)), r.standard_normal((cout, cin, k, k))
        out = T.conv2d(Tensor(x), Tensor(w), None, stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, None, stride, pad), rtol=0, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_integer_extent_rejected(self):
        with pytest.raises(ShapeError, match="not an integer"):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestFullyConnected:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(T.fully_connected(Tensor(x), Tensor(np.eye(4))).data, x)

    def test_zero_weight(self, rng):
        assert not T.fully_connected(Tensor(rng.standard_normal((2, 3))), Tensor(np.zeros((5, 3)))).data.any()

    def test_hand_case(self):
        out = T.fully_connected(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [1.0, -1.0]]))
        np.testing.assert_array_equal(out.data, [3.0, -1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            T.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestPooling:
    def test_constant_input_ties_to_first(self):
        out, idx = T.max_pool2d(Tensor(np.full((1, 2, 4, 4), 7.0)), 2)
        assert np.all(out.data == 7.0)
        assert not idx.any()

    def test_hand_case(self):
        out, idx = T.max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        assert out.data.item() == 4.0
        assert idx.item() == 3  # row-major position (1, 1)

    def test_matches_brute_force(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        out, idx = T.max_pool2d(Tensor(x), 2)
        ref, ref_idx = max_pool_loops(x, 2)
        np.testing.assert_array_equal(out.data, ref)
        np.testing.assert_array_equal(idx, ref_idx)

    def test_ties_inside_window(self):
        x = np.array([[[[5.0, 5.0, 0.0, 1.0], [5.0, 1.0, 1.0, 1.0]]]])
        _, idx = T.max_pool2d(Tensor(x), 2)
        np.testing.assert_array_equal(idx, [[[[0, 1]]]])

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            T.max_pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)

    def test_unpool_round_trip(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        pooled, idx = T.max_pool2d(Tensor(x), 2)
        up = T.max_unpool2d(pooled, idx, 2).data
        nz = up != 0
        assert nz.sum() == pooled.size
        np.testing.assert_array_equal(up[nz], x[nz])
        assert np.all(x[nz] == np.repeat(np.repeat(pooled.data, 2, 2), 2, 3)[nz])

    def test_unpool_zero(self):
        out = T.max_unpool2d(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 2), dtype=int), 2)
        assert not out.data.any()

    def test_unpool_hand_case(self):
        out = T.max_unpool2d(Tensor([[[[5.0]]]]), np.array([[[[2]]]]), 2)
        np.testing.assert_array_equal(out.data[0, 0], [[0.0, 0.0], [5.0, 0.0]])

    def test_unpool_out_of_range(self):
        with pytest.raises(ShapeError, match="window"):
            T.max_unpool2d(Tensor(np.ones((1, 1, 1, 1))), np.array([[[[4]]]]), 2)


class TestUpsample:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(T.upsample_nearest(Tensor(x), 1).data, x)

    def test_replication(self):
        np.testing.assert_array_equal(T.upsample_nearest(Tensor([[[[3.0]]]]), 2).data, np.full((1, 1, 2, 2), 3.0))

    def test_sum_gradient_is_k_squared(self, rng):
        x = rng.standard_normal((1, 2, 2, 3))
        k = 3
        num = finite_diff_gradient(lambda a: T.upsample_nearest(Tensor(a), k).data.sum(), x)
        np.testing.assert_allclose(num, np.full(x.shape, k * k), atol=1e-8)
        t = Tensor(x, requires_grad=True)
        backward(T.upsample_nearest(t, k).sum())
        np.testing.assert_array_equal(t.grad, np.full(x.shape, float(k * k)))


class TestActivations:
    def test_values(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_sigmoid_gradient_at_zero(self):
        t = Tensor(0.0, requires_grad=True)
        backward(T.sigmoid(t))
        num = finite_diff_gradient(lambda a: T.sigmoid(Tensor(a)).item(), np.array(0.0))
        assert t.grad == 0.25
        assert abs(num - 0.25) <= 1e-8

    def test_sigmoid_saturates_without_overflow(self):
        out = T.sigmoid(Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation("tanh", Tensor(1.0))


class TestSoftmax:
    def test_uniform(self):
        p = T.softmax_channels(Tensor(np.zeros((1, 4, 2, 2)))).data
        np.testing.assert_array_equal(p, np.full((1, 4, 2, 2), 0.25))

    def test_closed_form(self):
        p = T.softmax_channels(Tensor(np.array([0.0, math.log(3)]).reshape(1, 2, 1, 1))).data.ravel()
        np.testing.assert_allclose(p, [0.25, 0.75], rtol=0, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (2, 3, 2, 2), elements=st.floats(-50, 50)),
        arrays(np.float64, (2, 1, 2, 2), elements=st.floats(-100, 100)),
    )
    def test_normalized_and_shift_invariant(self, logits, shift):
        p = T.softmax_channels(Tensor(logits)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        q = T.softmax_channels(Tensor(logits + shift)).data
        np.testing.assert_allclose(p, q, rtol=0, atol=1e-12)


class TestConcat:
    def test_empty_operand(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        out = T.concat_channels(Tensor(x), Tensor(np.zeros((1, 0, 3, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_shape(self):
        assert T.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4)))).shape == (1, 5, 4, 4)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 2))))


class TestBackward:
    def test_identity_graph(self):
        x = Tensor(5.0, requires_grad=True)
        backward(x)
        assert x.grad == 1.0

    def test_product_rule(self):
        x, y = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
        backward(x * y)
        assert x.grad == 3.0 and y.grad == 2.0

    def test_unreachable_parameter_is_zero(self):
        x, unused = Tensor([1.0, 2.0], requires_grad=True), Tensor([[4.0]], requires_grad=True)
        grads = backward((x * x).sum(), [x, unused])
        np.testing.assert_array_equal(grads[id(unused)], np.zeros((1, 1)))
        np.testing.assert_array_equal(grads[id(x)], [2.0, 4.0])

    def test_fan_out_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x + x)
        assert x.grad == 7.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError, match="scalar"):
            backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_repeatable_bitwise(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = T.relu(T.conv2d(x, w, padding=1))
        loss = (T.max_pool2d(y, 2)[0] * T.sigmoid(y).mean()).sum()
        backward(loss)
        first = (x.grad.copy(), w.grad.copy())
        backward(loss)
        assert np.array_equal(first[0], x.grad) and np.array_equal(first[1], w.grad)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(1.0, requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()


class TestFiniteDifference:
    def test_sum(self, rng):
        np.testing.assert_allclose(finite_diff_gradient(lambda a: a.sum(), rng.standard_normal(5)), 1.0, atol=1e-9)

    def test_square(self):
        g = finite_diff_gradient(lambda a: (a**2).sum(), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], rtol=0, atol=1e-8)

    def test_constant(self):
        g = finite_diff_gradient(lambda a: 3.0, np.array([1.0, 2.0]))
        assert np.all(np.abs(g) <= 1e-10)

    def test_rejects_non_positive_eps(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda a: 0.0, np.zeros(1), eps=0)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("layer", sorted(LAYER_PROBLEMS))
def test_layer_gradients(layer, seed):
    result = gradcheck_block(layer, seed=seed)
    assert result.max_error <= BLOCK_TOL, result.errors


def test_kink_recorder_detects_region_change():
    x = Tensor([-1e-6, 2.0])
    with T.record_kinks() as a:
        T.relu(x)
    with T.record_kinks() as b:
        T.relu(Tensor([1e-6, 2.0]))
    assert not T._same_region(a.log, b.log)
