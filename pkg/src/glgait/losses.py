"""Per-strip metric and classification losses.

All losses take strip embeddings shaped (N samples, H2 strips, C4 channels)
and treat every strip as an independent embedding space; the strip losses are
then averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tf
from .errors import ConfigurationError, DataError, SamplingError
from .tensor import Tensor


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigurationError(f"triplet margin must be > 0, got {self.margin}")


@dataclass(frozen=True)
class CEConfig:
    num_classes: int
    smoothing: float = 0.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"cross-entropy needs >= 2 classes, got {self.num_classes}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigurationError(f"label smoothing must lie in [0, 1), got {self.smoothing}")


def _check_strips(x: Tensor, labels: np.ndarray) -> None:
    if x.ndim != 3:
        raise ConfigurationError(f"strip embeddings must be (N, strips, channels), got {x.shape}")
    if labels.shape != (x.shape[0],):
        raise ConfigurationError(f"{labels.shape[0] if labels.ndim else 0} labels for {x.shape[0]} samples")


def triplet_mask(labels) -> np.ndarray:
    """Boolean (a, p, n) mask of valid triplets: same(a, p), a != p, label(n) != label(a)."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def count_triplets(labels) -> int:
    return int(triplet_mask(labels).sum())


def pairwise_distances(strips: Tensor) -> Tensor:
    """Euclidean distances per strip: (N, H, C) -> (H, N, N)."""
    n, h, c = strips.shape
    e = strips.transpose(1, 0, 2)
    diff = e.reshape(h, n, 1, c) - e.reshape(h, 1, n, c)
    return tf.sqrt((diff * diff).sum(axis=3))


def batch_all_triplet(strip_embeddings: Tensor, labels, cfg: TripletConfig = TripletConfig()) -> Tensor:
    """Batch-all triplet loss ``[D(a,p) - D(a,n) + m]+``.

    Each strip averages its hinge over the triplets with a positive hinge (a
    strip with none contributes 0); the result is the mean over strips.
    """
    labels = np.asarray(labels)
    _check_strips(strip_embeddings, labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise SamplingError("triplet loss needs at least 2 distinct labels in the batch")
    if counts.min() < 2:
        raise SamplingError(f"every label needs >= 2 samples, label {uniq[counts.argmin()]} has {counts.min()}")

    n, h, _ = strip_embeddings.shape
    dist = pairwise_distances(strip_embeddings)
    hinge = dist.reshape(h, n, n, 1) - dist.reshape(h, n, 1, n) + cfg.margin
    mask = triplet_mask(labels)
    active = (hinge.data > 0) & mask
    tf.note_branch(active)
    count = active.reshape(h, -1).sum(axis=1)
    weights = np.where(active, 1.0 / np.maximum(count, 1)[:, None, None, None], 0.0).astype(hinge.dtype)
    # margin split out of the average so equal distances give exactly m
    gap = dist.reshape(h, n, n, 1) - dist.reshape(h, n, 1, n)
    live = float(np.mean(count > 0))
    return (gap * weights).sum(axis=(1, 2, 3)).mean() + cfg.margin * live


def strip_logits(strip_embeddings: Tensor, weight: Tensor) -> Tensor:
    """Per-strip classifiers: (N, H, C) x (H, C, K) -> (H, N, K)."""
    return tf.matmul(strip_embeddings.transpose(1, 0, 2), weight)


def cross_entropy_from_logits(logits: Tensor, labels, cfg: CEConfig) -> Tensor:
    """Label-smoothed cross-entropy averaged over all leading axes; logits (..., N, K)."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if k != cfg.num_classes:
        raise ConfigurationError(f"logits have {k} classes, config says {cfg.num_classes}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    target = np.full((len(labels), k), cfg.smoothing / k)
    target[np.arange(len(labels)), labels] += 1.0 - cfg.smoothing
    logp = tf.log_softmax(logits, axis=-1)
    per_sample = -(logp * target.astype(logits.dtype)).sum(axis=-1)
    return per_sample.mean()


def cross_entropy_smooth(strip_embeddings: Tensor, labels, cfg: CEConfig, weight: Tensor) -> Tensor:
    labels = np.asarray(labels)
    _check_strips(strip_embeddings, labels)
    return cross_entropy_from_logits(strip_logits(strip_embeddings, weight), labels, cfg)


@dataclass
class LossTerms:
    triplet: Tensor
    cross_entropy: Tensor | None

    @property
    def total(self) -> Tensor:
        if self.cross_entropy is None:
            return self.triplet
        return self.triplet + self.cross_entropy


def loss_terms(
    strip_embeddings: Tensor,
    labels,
    trip_cfg: TripletConfig,
    ce_cfg: CEConfig | None = None,
    ce_weight: Tensor | None = None,
) -> LossTerms:
    tri = batch_all_triplet(strip_embeddings, labels, trip_cfg)
    ce = None
    if ce_cfg is not None:
        if ce_weight is None:
            raise ConfigurationError("cross-entropy term requested without classifier weights")
        ce = cross_entropy_smooth(strip_embeddings, labels, ce_cfg, ce_weight)
    return LossTerms(tri, ce)


def combined_loss(strip_embeddings, labels, trip_cfg, ce_cfg=None, ce_weight=None) -> Tensor:
    """Unweighted sum of the triplet and cross-entropy terms."""
    return loss_terms(strip_embeddings, labels, trip_cfg, ce_cfg, ce_weight).total
