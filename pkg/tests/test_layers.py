import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glgait import layers as L
from glgait.conv import conv3d
from glgait.errors import ConfigurationError, InputTooSmallError, ParameterDomainError
from glgait.tensor import Tensor


class TestLTA:
    def test_thirty_frames_become_ten(self, rng):
        lta = L.LTA(L.LTAConfig(4, 4), rng)
        assert lta(Tensor(rng.standard_normal((1, 4, 30, 8, 6)))).shape == (1, 4, 10, 8, 6)

    @pytest.mark.parametrize("t,expected", [(3, 1), (4, 1), (5, 1), (6, 2), (61, 20)])
    def test_output_frames(self, t, expected):
        assert L.LTAConfig(1, 1).output_frames(t) == expected

    def test_too_few_frames(self, rng):
        lta = L.LTA(L.LTAConfig(1, 1), rng)
        with pytest.raises(InputTooSmallError):
            lta(Tensor(np.zeros((1, 1, 2, 4, 4))))

    def test_mixes_only_time(self, rng):
        # a pixel's output depends on that pixel alone
        lta = L.LTA(L.LTAConfig(1, 1), rng)
        x = np.zeros((1, 1, 3, 4, 4))
        x[0, 0, :, 1, 2] = 1.0
        out = lta(Tensor(x)).data - lta.conv.bias.data
        assert np.count_nonzero(np.abs(out) > 1e-15) == 1


def part_oracle(x, n, w, b):
    """Slice each band, convolve it alone, stack the results back."""
    hp = x.shape[3] // n
    outs = [conv3d(Tensor(x[:, :, :, i * hp : (i + 1) * hp]), Tensor(w), Tensor(b), 1, 1).data for i in range(n)]
    return np.concatenate(outs, axis=3)


class TestGLConv:
    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_local_branch_equals_independent_parts(self, n, rng):
        x = rng.standard_normal((2, 2, 3, 8, 5))
        w, b = rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)
        got = L.local_branch(Tensor(x), n, Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, part_oracle(x, n, w, b), atol=1e-12)

    def test_add_with_one_part_and_tied_weights_doubles_conv(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)))
        w, b = Tensor(rng.standard_normal((2, 2, 3, 3, 3))), Tensor(rng.standard_normal(2))
        cfg = L.GLConvConfig(2, 2, n_parts=1, combine=L.Combine.ADD)
        got = L.glconv_forward(x, cfg, w, b, w, b).data
        np.testing.assert_allclose(got, 2 * conv3d(x, w, b, 1, 1).data, atol=1e-12)

    def test_concat_doubles_height(self, rng):
        gl = L.GLConv(L.GLConvConfig(2, 3, n_parts=4, combine=L.Combine.CONCAT), rng)
        assert gl(Tensor(rng.standard_normal((1, 2, 2, 8, 4)))).shape == (1, 3, 2, 16, 4)

    def test_indivisible_height(self, rng):
        gl = L.GLConv(L.GLConvConfig(1, 1, n_parts=3), rng)
        with pytest.raises(ConfigurationError, match="divisible"):
            gl(Tensor(np.zeros((1, 1, 1, 8, 4))))

    def test_global_only_is_plain_conv(self, rng):
        gl = L.GLConv(L.GLConvConfig(2, 2, global_on=True, local_on=False), rng)
        x = Tensor(rng.standard_normal((1, 2, 2, 8, 3)))
        assert gl.local_conv is None
        np.testing.assert_array_equal(gl(x).data, conv3d(x, gl.global_conv.weight, gl.global_conv.bias, 1, 1).data)

    def test_local_only_is_plain_local(self, rng):
        gl = L.GLConv(L.GLConvConfig(2, 2, n_parts=2, global_on=False, local_on=True), rng)
        x = Tensor(rng.standard_normal((1, 2, 2, 8, 3)))
        ref = L.local_branch(x, 2, gl.local_conv.weight, gl.local_conv.bias).data
        np.testing.assert_array_equal(gl(x).data, ref)

    def test_concat_with_disabled_branch_zero_fills(self, rng):
        cfg = L.GLConvConfig(1, 1, n_parts=2, combine=L.Combine.CONCAT, local_on=False)
        gl = L.GLConv(cfg, rng)
        out = gl(Tensor(rng.standard_normal((1, 1, 1, 4, 4)))).data
        assert out.shape[3] == 8
        assert np.all(out[:, :, :, 4:] == 0)

    def test_both_branches_off_rejected(self):
        with pytest.raises(ConfigurationError):
            L.GLConvConfig(1, 1, global_on=False, local_on=False)


class TestPooling:
    def test_spatial_pool_halves(self, rng):
        assert L.spatial_max_pool(Tensor(rng.standard_normal((1, 2, 3, 64, 44)))).shape == (1, 2, 3, 32, 22)

    def test_temporal_pool_shape(self, rng):
        assert L.temporal_pool(Tensor(rng.standard_normal((2, 3, 7, 4, 5)))).shape == (2, 3, 1, 4, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.randoms(use_true_random=False))
    def test_temporal_pool_permutation_invariant(self, t, r):
        x = np.random.default_rng(t).standard_normal((2, 3, t, 4, 2))
        perm = list(range(t))
        r.shuffle(perm)
        a = L.temporal_pool(Tensor(x)).data
        b = L.temporal_pool(Tensor(x[:, :, perm])).data
        assert a.tobytes() == b.tobytes()

    def test_weighted_sum_map_max_plus_avg(self, rng):
        y = rng.standard_normal((2, 3, 1, 4, 5))
        out = L.weighted_sum_map(Tensor(y), 1.0, 1.0).data
        np.testing.assert_allclose(out, y.max(axis=4, keepdims=True) + y.mean(axis=4, keepdims=True))

    def test_weighted_sum_map_needs_a_weight(self, rng):
        with pytest.raises(ConfigurationError):
            L.weighted_sum_map(Tensor(np.zeros((1, 1, 1, 2, 2))), 0.0, 0.0)

    def test_mapping_requires_pooled_time(self):
        with pytest.raises(ConfigurationError):
            L.gem_pool(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.array([2.0])))


class TestGeM:
    def test_p_one_is_mean_of_clamped(self, rng):
        y = rng.standard_normal((2, 3, 1, 4, 11))
        out = L.gem_pool(Tensor(y), Tensor(np.array([1.0]))).data
        ref = np.maximum(y, 1e-6).mean(axis=4, keepdims=True)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

    def test_large_p_approaches_max(self, rng):
        y = rng.uniform(0.1, 2.0, (3, 2, 1, 4, 11))
        out = L.gem_pool(Tensor(y), Tensor(np.array([100.0]))).data
        mx = y.max(axis=4, keepdims=True)
        assert np.all(np.abs(out - mx) / mx <= 0.03)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1.0, 20.0), st.floats(0.01, 5.0), st.integers(0, 10_000))
    def test_monotone_in_p(self, p1, dp, seed):
        row = np.random.default_rng(seed).uniform(0.05, 3.0, (1, 1, 1, 1, 7))
        lo = L.gem_pool(Tensor(row), Tensor(np.array([p1]))).data
        hi = L.gem_pool(Tensor(row), Tensor(np.array([p1 + dp]))).data
        assert hi.item() > lo.item()

    @pytest.mark.parametrize("p", [0.0, -1.0])
    def test_non_positive_p_rejected(self, p):
        with pytest.raises(ParameterDomainError):
            L.gem_pool(Tensor(np.ones((1, 1, 1, 1, 2))), Tensor(np.array([p])))

    def test_float32_with_large_p_has_finite_gradient(self, rng):
        y = Tensor(rng.standard_normal((1, 2, 1, 4, 5)).astype(np.float32), requires_grad=True)
        p = Tensor(np.array([12.0], dtype=np.float32), requires_grad=True)
        out = L.gem_pool(y, p)
        assert out.dtype == np.float32
        out.sum().backward()
        assert np.all(np.isfinite(y.grad)) and np.all(np.isfinite(p.grad))

    def test_module_starts_at_p0(self):
        assert L.GeM(L.GeMConfig(6.5)).p.data.tolist() == [6.5]


class TestSeparateFC:
    def test_matches_per_strip_loop(self, rng):
        y = rng.standard_normal((3, 4, 1, 5, 1))
        w = rng.standard_normal((5, 4, 2))
        out = L.separate_fc(Tensor(y), Tensor(w)).data
        ref = np.stack([y[:, :, 0, s, 0] @ w[s] for s in range(5)], axis=2)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_weight_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            L.separate_fc(Tensor(np.zeros((1, 4, 1, 5, 1))), Tensor(np.zeros((4, 4, 2))))


class TestModule:
    def test_named_parameters_are_nested(self, rng):
        seq = L.Sequential(L.Conv3d(L.LTAConfig(1, 2).conv_spec(), rng), L.LeakyReLU())
        assert [n for n, _ in seq.named_parameters()] == ["0.weight", "0.bias"]

    def test_astype_converts_all(self, rng):
        m = L.GLConv(L.GLConvConfig(1, 2), rng).astype(np.float32)
        assert all(p.dtype == np.float32 for p in m.parameters())

    def test_uniform_init_bound(self, rng):
        w = L.uniform_init(rng, (1000,), 27)
        assert np.abs(w).max() <= np.sqrt(1 / 27)
