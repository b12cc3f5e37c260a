import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glgait import tensor as tf
from glgait.errors import ConfigurationError, ContractError
from glgait.tensor import Tensor, no_grad

from oracles import central_difference


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_output_rejected(self):
        x = leaf(np.ones(3))
        with pytest.raises(ContractError):
            (x * 2).backward()

    def test_gradients_accumulate_on_reuse(self):
        x = leaf([3.0])
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_gradient_is_reduced(self):
        x = leaf(np.ones((2, 3)))
        b = leaf(np.ones(3))
        (x * b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0, 2.0])
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert tf.is_grad_enabled()

    def test_deep_chain_does_not_recurse(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0


class TestElementwise:
    @pytest.mark.parametrize(
        "op",
        [
            lambda t: tf.leaky_relu(t, 0.01),
            lambda t: tf.exp(t * 0.3),
            lambda t: tf.log(tf.clamp_min(t, 0.1) + 1.0),
            lambda t: tf.power(tf.clamp_min(t, 0.2), 2.5),
            lambda t: tf.sqrt(t * t + 1.0),
            lambda t: tf.log_softmax(t, axis=-1),
            lambda t: tf.mean_over_axis(t, 1, keepdims=True),
            lambda t: t / (t * t + 2.0),
        ],
    )
    def test_matches_finite_differences(self, op, rng):
        x = rng.uniform(-2, 2, (3, 4))
        # keep away from the kinks at 0 and 0.1/0.2
        x = np.where(np.abs(x) < 0.3, x + 0.6, x)
        r = rng.standard_normal((3, 4))
        t = leaf(x)
        (op(t) * Tensor(r)).sum().backward()
        num = central_difference(lambda: float((op(Tensor(x)).data * r).sum()), x)
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-9)

    def test_power_gradient_wrt_exponent(self):
        x = leaf([2.0, 3.0])
        p = leaf([1.5])
        tf.power(x, p).sum().backward()
        expected = (np.array([2.0, 3.0]) ** 1.5 * np.log([2.0, 3.0])).sum()
        np.testing.assert_allclose(p.grad, [expected])

    def test_sqrt_gradient_is_zero_at_zero(self):
        x = leaf([0.0, 4.0])
        tf.sqrt(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.25])

    def test_clamp_min_passes_gradient_only_above(self):
        x = leaf([-1.0, 1e-7, 2.0])
        tf.clamp_min(x, 1e-6).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_leaky_relu_slope(self):
        x = leaf([-2.0, 3.0])
        y = tf.leaky_relu(x, 0.01)
        np.testing.assert_allclose(y.data, [-0.02, 3.0])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [0.01, 1.0])


class TestMax:
    def test_tie_routes_gradient_to_first(self):
        x = leaf([[1.0, 5.0, 5.0, 2.0]])
        tf.max_over_axis(x, 1).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_pool_tie_routes_to_lowest_linear_index(self):
        x = leaf(np.ones((1, 1, 1, 2, 2)))
        tf.max_pool_hw(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad.ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_pool_matches_reference(self, rng):
        x = rng.standard_normal((2, 3, 2, 4, 6))
        ref = x.reshape(2, 3, 2, 2, 2, 3, 2).max(axis=(4, 6))
        np.testing.assert_array_equal(tf.max_pool_hw(Tensor(x), 2).data, ref)

    def test_pool_rejects_odd_sizes(self):
        with pytest.raises(ConfigurationError):
            tf.max_pool_hw(Tensor(np.zeros((1, 1, 1, 3, 4))), 2)

    def test_axis_out_of_range(self):
        with pytest.raises(ConfigurationError):
            tf.max_over_axis(Tensor(np.zeros((2, 2))), 5)


class TestShapeOps:
    def test_concat_along_height_shape(self):
        a = Tensor(np.zeros((1, 2, 3, 4, 5)))
        assert tf.concat_along_height([a, a]).shape == (1, 2, 3, 8, 5)

    def test_concat_rejects_mismatch(self):
        with pytest.raises(ConfigurationError):
            tf.concat_along_height([Tensor(np.zeros((1, 2, 3, 4, 5))), Tensor(np.zeros((1, 3, 3, 4, 5)))])

    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_slices_reassemble(self, n, rng):
        x = rng.standard_normal((1, 2, 3, 8, 5))
        parts = [tf.slice_height(Tensor(x), i * 8 // n, 8 // n) for i in range(n)]
        np.testing.assert_array_equal(tf.concat_along_height(parts).data, x)

    def test_slice_out_of_range(self):
        with pytest.raises(ConfigurationError):
            tf.slice_height(Tensor(np.zeros((1, 1, 1, 4, 1))), 3, 2)

    def test_concat_backward_splits(self):
        a, b = leaf(np.ones((1, 1, 1, 2, 1))), leaf(np.ones((1, 1, 1, 3, 1)))
        out = tf.concat_along_height([a, b])
        (out * Tensor(np.arange(5.0).reshape(1, 1, 1, 5, 1))).sum().backward()
        np.testing.assert_array_equal(a.grad.ravel(), [0, 1])
        np.testing.assert_array_equal(b.grad.ravel(), [2, 3, 4])

    def test_batched_matmul_gradient(self, rng):
        a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 4, 5))
        ta, tb = leaf(a), leaf(b)
        tf.matmul(ta, tb).sum().backward()
        np.testing.assert_allclose(ta.grad, np.ones((3, 2, 5)) @ b.transpose(0, 2, 1))
        np.testing.assert_allclose(tb.grad, a.transpose(0, 2, 1) @ np.ones((3, 2, 5)))

    def test_astype_gradient_keeps_source_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        tf.astype(x, np.float64).sum().backward()
        assert x.grad.dtype == np.float32


class TestBranchRecording:
    def test_records_decisions_of_nonsmooth_ops(self):
        x = Tensor(np.array([[-1.0, 2.0, 0.5]]))
        with tf.record_branches() as log:
            tf.max_over_axis(tf.leaky_relu(x), 1)
        assert len(log) == 2
        np.testing.assert_array_equal(log[0], [[False, True, True]])

    def test_silent_outside_context(self):
        tf.note_branch(np.ones(2))  # no recorder active: must be a no-op


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-10, 10)))
def test_mean_over_axis_gradient_is_uniform(x):
    t = Tensor(x, requires_grad=True)
    tf.mean_over_axis(t, 1).sum().backward()
    np.testing.assert_allclose(t.grad, np.full(x.shape, 1.0 / x.shape[1]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6)), elements=st.floats(-10, 10)))
def test_max_gradient_is_one_hot(x):
    t = Tensor(x, requires_grad=True)
    tf.max_over_axis(t, 1).sum().backward()
    np.testing.assert_array_equal(t.grad.sum(axis=1), np.ones(x.shape[0]))
    np.testing.assert_array_equal(t.grad.argmax(axis=1), x.argmax(axis=1))
