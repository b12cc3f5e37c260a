import numpy as np
import pytest

from glgait.conv import ConvSpec, conv3d
from glgait.errors import ConfigurationError, InputTooSmallError
from glgait.tensor import Tensor, no_grad

from oracles import central_difference, conv3d_direct


def random_instance(rng):
    """Random geometry with every dimension <= 6."""
    n, c, o = rng.integers(1, 4, size=3)
    kt, kh, kw = rng.integers(1, 4, size=3)
    st, sh, sw = rng.integers(1, 3, size=3)
    pt, ph, pw = rng.integers(0, 2, size=3)
    t = int(rng.integers(kt, 7))
    h = int(rng.integers(kh, 7))
    w = int(rng.integers(kw, 7))
    x = rng.standard_normal((n, c, t, h, w))
    k = rng.standard_normal((o, c, kt, kh, kw))
    b = rng.standard_normal(o)
    return x, k, b, (int(st), int(sh), int(sw)), (int(pt), int(ph), int(pw))


class TestForward:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_direct_summation(self, seed):
        x, k, b, stride, pad = random_instance(np.random.default_rng(seed))
        out = conv3d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
        np.testing.assert_allclose(out, conv3d_direct(x, k, b, stride, pad), rtol=0, atol=1e-12)

    def test_same_padding_keeps_shape(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 8, 6)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3, 3)))
        assert conv3d(x, w, None, 1, 1).shape == (2, 4, 5, 8, 6)

    def test_temporal_stride_three(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 30, 4, 4)))
        w = Tensor(rng.standard_normal((2, 2, 3, 1, 1)))
        assert conv3d(x, w, None, (3, 1, 1), 0).shape == (1, 2, 10, 4, 4)

    def test_float32_stays_float32(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 3, 4, 4)).astype(np.float32))
        w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)).astype(np.float32))
        assert conv3d(x, w, None, 1, 1).dtype == np.float32

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 3, 4, 5))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(conv3d(Tensor(x), Tensor(w), None, 1, 1).data, x)


class TestBackward:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x, k, b, stride, pad = random_instance(rng)
        out_shape = conv3d(Tensor(x), Tensor(k), Tensor(b), stride, pad).shape
        r = rng.standard_normal(out_shape)
        tx, tk, tb = (Tensor(a.copy(), requires_grad=True) for a in (x, k, b))
        (conv3d(tx, tk, tb, stride, pad) * Tensor(r)).sum().backward()

        def f():
            return float((conv3d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data * r).sum())

        for name, t, arr in (("x", tx, x), ("w", tk, k), ("b", tb, b)):
            np.testing.assert_allclose(t.grad, central_difference(f, arr), rtol=1e-6, atol=1e-8, err_msg=name)

    def test_no_input_gradient_when_not_required(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 3, 3, 3)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3, 3)), requires_grad=True)
        conv3d(x, w, None, 1, 1).sum().backward()
        assert x.grad is None and w.grad is not None

    def test_no_graph_under_no_grad(self, rng):
        w = Tensor(rng.standard_normal((1, 1, 1, 1, 1)), requires_grad=True)
        with no_grad():
            y = conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), w)
        assert not y.requires_grad


class TestValidation:
    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError, match="channels"):
            conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 3, 3, 3))))

    def test_rank_mismatch(self):
        with pytest.raises(ConfigurationError):
            conv3d(Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((1, 2, 3, 3, 3))))

    def test_bias_shape(self):
        with pytest.raises(ConfigurationError, match="bias"):
            conv3d(Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros((2, 1, 1, 1, 1))), Tensor(np.zeros(3)))

    @pytest.mark.parametrize("dims,axis", [((2, 8, 8), "T"), ((8, 2, 8), "H"), ((8, 8, 2), "W")])
    def test_input_too_small_names_axis(self, dims, axis):
        spec = ConvSpec(1, 1, (3, 3, 3), (1, 1, 1), (0, 0, 0))
        with pytest.raises(InputTooSmallError, match=axis):
            spec.output_dims(*dims)

    def test_spec_rejects_zero_channels(self):
        with pytest.raises(ConfigurationError):
            ConvSpec(0, 4)

    def test_spec_output_dims(self):
        assert ConvSpec(1, 1, (3, 1, 1), (3, 1, 1), (0, 0, 0)).output_dims(30, 64, 44) == (10, 64, 44)
