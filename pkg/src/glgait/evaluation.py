"""Embedding extraction and cross-view Rank-1 evaluation."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import GaitDataset, pad_cyclic
from .errors import ConfigurationError
from .model import GaitNet

log = logging.getLogger(__name__)

MIN_EVAL_FRAMES = 30


@dataclass
class EmbeddingMatrix:
    """Row-aligned features and metadata; rows are strip-major flattened embeddings."""

    features: np.ndarray  # (R, H2 * C4)
    subjects: list[str] = field(default_factory=list)
    conditions: list[str] = field(default_factory=list)
    views: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    def rows(self) -> list[dict]:
        return [
            {"subject": s, "condition": c, "view": v}
            for s, c, v in zip(self.subjects, self.conditions, self.views)
        ]

    @classmethod
    def from_rows(cls, features: np.ndarray, rows: list[dict]) -> "EmbeddingMatrix":
        return cls(
            np.asarray(features),
            [r["subject"] for r in rows],
            [r["condition"] for r in rows],
            [int(r["view"]) for r in rows],
        )


def extract_embeddings(model: GaitNet, dataset: GaitDataset, pad_to: int = MIN_EVAL_FRAMES) -> EmbeddingMatrix:
    """Run every whole sequence through the model, cyclically padded to ``pad_to`` frames."""
    dim = model.cfg.embedding_dim
    dtype = model.parameters()[0].dtype
    feats = np.zeros((len(dataset), dim), dtype=np.float32)
    subjects, conditions, views = [], [], []
    for i, seq in enumerate(dataset):
        frames = pad_cyclic(seq.frames, max(pad_to, model.min_frames))
        feats[i] = model.embed(frames[None, None].astype(dtype))[0]
        subjects.append(seq.subject)
        conditions.append(seq.condition)
        views.append(seq.view)
    return EmbeddingMatrix(feats, subjects, conditions, views)


@dataclass(frozen=True)
class EvalProtocol:
    name: str
    gallery: tuple[str, ...]
    probes: dict  # condition label -> tuple of sequence conditions
    views: tuple[int, ...]


CASIA_B = EvalProtocol(
    "casia-b",
    ("nm-01", "nm-02", "nm-03", "nm-04"),
    {"NM": ("nm-05", "nm-06"), "BG": ("bg-01", "bg-02"), "CL": ("cl-01", "cl-02")},
    tuple(range(0, 181, 18)),
)
OUMVLP = EvalProtocol(
    "oumvlp",
    ("01",),
    {"NM": ("00",)},
    tuple(range(0, 91, 15)) + tuple(range(180, 271, 15)),
)
SYNTHETIC = EvalProtocol("synthetic", ("nm-01", "nm-02"), {"NM": ("nm-03", "nm-04")}, (0, 90))

PROTOCOLS = {p.name: p for p in (CASIA_B, OUMVLP, SYNTHETIC)}


def get_protocol(name: str) -> EvalProtocol:
    try:
        return PROTOCOLS[name]
    except KeyError:
        raise ConfigurationError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}") from None


@dataclass
class Rank1Result:
    protocol: EvalProtocol
    # condition -> (n_views, n_views) accuracy in percent, NaN on the diagonal and for empty cells
    matrices: dict

    def per_view(self, condition: str) -> np.ndarray:
        """Mean over gallery views (excluding identical and empty cells) for each probe view."""
        m = self.matrices[condition]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(m, axis=1)

    def mean(self, condition: str) -> float:
        pv = self.per_view(condition)
        pv = pv[~np.isnan(pv)]
        return float(pv.mean()) if pv.size else float("nan")


def nearest_gallery(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Index of the Euclidean nearest gallery row per probe row; ties go to the lowest index."""
    d2 = (
        np.sum(probe.astype(np.float64) ** 2, 1)[:, None]
        - 2.0 * probe.astype(np.float64) @ gallery.astype(np.float64).T
        + np.sum(gallery.astype(np.float64) ** 2, 1)[None, :]
    )
    return np.argmin(d2, axis=1)


def rank1(emb: EmbeddingMatrix, protocol: EvalProtocol) -> Rank1Result:
    subjects = np.asarray(emb.subjects, dtype=object)
    conds = np.asarray(emb.conditions, dtype=object)
    views = np.asarray(emb.views, dtype=np.int64)
    in_gallery = np.isin(conds, protocol.gallery)
    nv = len(protocol.views)
    matrices = {}
    for label, probe_conds in protocol.probes.items():
        in_probe = np.isin(conds, probe_conds)
        mat = np.full((nv, nv), np.nan)
        for i, pv in enumerate(protocol.views):
            p_idx = np.flatnonzero(in_probe & (views == pv))
            for j, gv in enumerate(protocol.views):
                if i == j:
                    continue
                g_idx = np.flatnonzero(in_gallery & (views == gv))
                if p_idx.size == 0 or g_idx.size == 0:
                    warnings.warn(f"{label} probe view {pv} vs gallery view {gv}: empty cell", RuntimeWarning)
                    continue
                nn = nearest_gallery(emb.features[p_idx], emb.features[g_idx])
                hits = subjects[g_idx[nn]] == subjects[p_idx]
                mat[i, j] = 100.0 * hits.mean()
        matrices[label] = mat
    return Rank1Result(protocol, matrices)


def report(result: Rank1Result | None, protocol: EvalProtocol | None = None) -> tuple[str, str]:
    """Text table and CSV: one block per condition, a column per probe view, and the mean."""
    protocol = protocol or (result.protocol if result else SYNTHETIC)
    header = ["condition"] + [str(v) for v in protocol.views] + ["mean"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    width = max(7, max(len(h) for h in header))
    lines = ["".join(h.rjust(width) for h in header)]
    if result is not None:
        for label in protocol.probes:
            if label not in result.matrices:
                continue
            pv = result.per_view(label)
            vals = [*pv, result.mean(label)]
            writer.writerow([label] + ["nan" if np.isnan(v) else f"{v:.2f}" for v in vals])
            lines.append(label.rjust(width) + "".join(("-" if np.isnan(v) else f"{v:.2f}").rjust(width) for v in vals))
    return "\n".join(lines) + "\n", buf.getvalue()
