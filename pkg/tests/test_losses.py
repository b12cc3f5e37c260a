import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glgait.errors import ConfigurationError, DataError, SamplingError
from glgait.losses import (
    CEConfig,
    TripletConfig,
    batch_all_triplet,
    combined_loss,
    count_triplets,
    cross_entropy_from_logits,
    cross_entropy_smooth,
    pairwise_distances,
    triplet_mask,
)
from glgait.tensor import Tensor

from oracles import triplet_loop


def pk_labels(p, k):
    return np.repeat(np.arange(p), k)


class TestTriplet:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        emb = rng.standard_normal((6, 3, 4)) * 0.2
        labels = pk_labels(2, 3)
        got = batch_all_triplet(Tensor(emb), labels, TripletConfig(0.2)).item()
        assert got == pytest.approx(triplet_loop(emb, labels, 0.2), abs=1e-12)

    @pytest.mark.parametrize("p,k", [(2, 2), (2, 3), (4, 2), (3, 5)])
    def test_triplet_count(self, p, k):
        assert count_triplets(pk_labels(p, k)) == p * k * (k - 1) * (p - 1) * k

    def test_identical_embeddings_give_margin(self):
        emb = Tensor(np.ones((8, 4, 3)), requires_grad=True)
        loss = batch_all_triplet(emb, pk_labels(2, 4), TripletConfig(0.2))
        assert loss.item() == 0.2
        loss.backward()
        assert np.all(np.isfinite(emb.grad))

    def test_well_separated_gives_zero(self):
        emb = np.zeros((4, 1, 2))
        emb[2:, 0, 0] = 10.0
        assert batch_all_triplet(Tensor(emb), pk_labels(2, 2)).item() == 0.0

    def test_mask_excludes_self_pairs(self):
        m = triplet_mask(pk_labels(2, 2))
        assert not m[np.arange(4), np.arange(4)].any()

    def test_single_label_rejected(self):
        with pytest.raises(SamplingError):
            batch_all_triplet(Tensor(np.zeros((3, 1, 2))), [0, 0, 0])

    def test_singleton_label_rejected(self):
        with pytest.raises(SamplingError):
            batch_all_triplet(Tensor(np.zeros((3, 1, 2))), [0, 0, 1])

    def test_non_positive_margin(self):
        with pytest.raises(ConfigurationError):
            TripletConfig(0.0)

    def test_distances_symmetric_zero_diagonal(self, rng):
        d = pairwise_distances(Tensor(rng.standard_normal((5, 2, 3)))).data
        np.testing.assert_allclose(d, d.transpose(0, 2, 1))
        assert np.all(np.diagonal(d, axis1=1, axis2=2) == 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        emb = np.random.default_rng(seed).standard_normal((6, 2, 3))
        assert batch_all_triplet(Tensor(emb), pk_labels(3, 2)).item() >= 0.0


class TestCrossEntropy:
    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_uniform_logits(self, eps):
        logits = Tensor(np.zeros((3, 5, 8)))
        ce = cross_entropy_from_logits(logits, np.arange(5), CEConfig(8, eps)).item()
        assert abs(ce - math.log(8)) <= 1e-9

    def test_matches_manual_smoothing(self, rng):
        logits = rng.standard_normal((2, 3, 4))
        labels = np.array([0, 3, 1])
        eps = 0.1
        q = np.full((3, 4), eps / 4)
        q[np.arange(3), labels] += 1 - eps
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        ref = -(q[None] * logp).sum(-1).mean()
        got = cross_entropy_from_logits(Tensor(logits), labels, CEConfig(4, eps)).item()
        assert got == pytest.approx(ref, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy_from_logits(Tensor(np.zeros((1, 2, 3))), np.array([0, 3]), CEConfig(3))

    @pytest.mark.parametrize("eps", [-0.1, 1.0])
    def test_smoothing_domain(self, eps):
        with pytest.raises(ConfigurationError):
            CEConfig(4, eps)

    def test_per_strip_heads(self, rng):
        emb = rng.standard_normal((2, 3, 4))
        w = np.zeros((3, 4, 5))
        ce = cross_entropy_smooth(Tensor(emb), np.array([0, 1]), CEConfig(5), Tensor(w)).item()
        assert ce == pytest.approx(math.log(5))


def test_combined_is_sum(rng):
    emb, w = rng.standard_normal((4, 2, 3)), rng.standard_normal((2, 3, 2))
    labels = pk_labels(2, 2)
    tri = batch_all_triplet(Tensor(emb), labels).item()
    ce = cross_entropy_smooth(Tensor(emb), labels, CEConfig(2), Tensor(w)).item()
    total = combined_loss(Tensor(emb), labels, TripletConfig(), CEConfig(2), Tensor(w)).item()
    assert total == pytest.approx(tri + ce)


def test_combined_without_weights_rejected():
    with pytest.raises(ConfigurationError):
        combined_loss(Tensor(np.zeros((4, 1, 2))), pk_labels(2, 2), TripletConfig(), CEConfig(2))
