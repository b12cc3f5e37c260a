"""Silhouette sequences: normalization, storage, P x K clip sampling, synthetic walkers."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, SamplingError

log = logging.getLogger(__name__)

FRAME_HEIGHT = 64
FRAME_WIDTH = 44
MANIFEST_NAME = "manifest.json"


@dataclass
class SilhouetteSequence:
    subject: str
    condition: str
    view: int
    frames: np.ndarray  # (T, H, W) uint8 in {0, 1}

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 3 or len(self.frames) == 0:
            raise DataError(f"sequence {self.key} needs frames shaped (T>=1, H, W), got {self.frames.shape}")

    @property
    def key(self) -> str:
        return f"{self.subject}/{self.condition}/{self.view:03d}"

    def __len__(self) -> int:
        return len(self.frames)


class GaitDataset:
    """An ordered collection of sequences with a stable subject -> label map."""

    def __init__(self, sequences: Iterable[SilhouetteSequence]):
        self.sequences = list(sequences)
        self.subjects = sorted({s.subject for s in self.sequences})
        self._labels = {s: i for i, s in enumerate(self.subjects)}

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[SilhouetteSequence]:
        return iter(self.sequences)

    def __getitem__(self, i) -> SilhouetteSequence:
        return self.sequences[i]

    def label_of(self, subject: str) -> int:
        return self._labels[subject]

    def by_subject(self) -> dict[str, list[SilhouetteSequence]]:
        out: dict[str, list[SilhouetteSequence]] = {s: [] for s in self.subjects}
        for seq in self.sequences:
            out[seq.subject].append(seq)
        return out

    def select(self, conditions=None, views=None, subjects=None) -> "GaitDataset":
        def keep(s):
            return (
                (conditions is None or s.condition in conditions)
                and (views is None or s.view in views)
                and (subjects is None or s.subject in subjects)
            )

        return GaitDataset(s for s in self.sequences if keep(s))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


class EmptyFrameError(DataError):
    pass


def _binarize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == bool:
        return img
    if np.issubdtype(img.dtype, np.integer) and img.max(initial=0) > 1:
        return img > 127
    return img > 0.5


def normalize_frame(img: np.ndarray, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> np.ndarray:
    """Crop to the foreground rows, rescale to ``height`` rows keeping aspect,
    then cut a ``width``-column window centred on the horizontal centre of mass.

    Nearest-neighbour resampling keeps the frame binary.  Raises
    :class:`EmptyFrameError` when there is no foreground.
    """
    fg = _binarize(img)
    if fg.ndim != 2:
        raise DataError(f"frames must be 2-d, got shape {fg.shape}")
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        raise EmptyFrameError("frame has no foreground pixels")
    crop = fg[rows[0] : rows[-1] + 1]
    ch, cw = crop.shape
    new_w = max(1, int(np.floor(cw * height / ch + 0.5)))
    ri = np.minimum(((np.arange(height) + 0.5) * ch / height).astype(np.int64), ch - 1)
    ci = np.minimum(((np.arange(new_w) + 0.5) * cw / new_w).astype(np.int64), cw - 1)
    resized = crop[np.ix_(ri, ci)]

    cols = np.nonzero(resized)[1]
    centre = int(np.floor(cols.mean() + 0.5))
    start = centre - width // 2
    out = np.zeros((height, width), dtype=np.uint8)
    lo, hi = max(start, 0), min(start + width, new_w)
    if hi > lo:
        out[:, lo - start : hi - start] = resized[:, lo:hi]
    return out


def normalize_sequence(frames: Sequence[np.ndarray], key: str = "?") -> np.ndarray:
    """Normalize every frame, dropping empty ones; raise if nothing is left."""
    kept = []
    for i, f in enumerate(frames):
        try:
            kept.append(normalize_frame(f))
        except EmptyFrameError:
            log.warning("sequence %s: dropping empty frame %d", key, i)
    if not kept:
        raise DataError(f"sequence {key} has no usable frames")
    return np.stack(kept)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 8
    K: int = 8
    T: int = 30

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise SamplingError(f"triplets need P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.T < 1:
            raise SamplingError(f"clip length must be >= 1, got {self.T}")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def clip_indices(length: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous window of ``T`` frames; short sequences repeat cyclically from a random phase."""
    if length >= T:
        start = int(rng.integers(0, length - T + 1))
        return np.arange(start, start + T)
    phase = int(rng.integers(0, length))
    log.debug("cyclic repeat: %d frames -> %d (phase %d)", length, T, phase)
    return (phase + np.arange(T)) % length


@dataclass
class Batch:
    clips: np.ndarray  # (P*K, 1, T, H, W)
    labels: np.ndarray  # (P*K,)
    keys: list[str]


def sample_batch(dataset: GaitDataset, cfg: SamplerConfig, rng: np.random.Generator, dtype=np.float32) -> Batch:
    groups = dataset.by_subject()
    subjects = [s for s in dataset.subjects if groups[s]]
    if len(subjects) < cfg.P:
        raise SamplingError(f"need {cfg.P} subjects with sequences, dataset has {len(subjects)}")
    chosen = rng.choice(len(subjects), size=cfg.P, replace=False)
    clips, labels, keys = [], [], []
    for si in chosen:
        subject = subjects[int(si)]
        seqs = groups[subject]
        picks = rng.choice(len(seqs), size=cfg.K, replace=len(seqs) < cfg.K)
        for qi in picks:
            seq = seqs[int(qi)]
            clips.append(seq.frames[clip_indices(len(seq), cfg.T, rng)])
            labels.append(dataset.label_of(subject))
            keys.append(seq.key)
    arr = np.stack(clips)[:, None].astype(dtype)
    return Batch(arr, np.asarray(labels, dtype=np.int64), keys)


def pad_cyclic(frames: np.ndarray, min_frames: int) -> np.ndarray:
    """Repeat a sequence end-to-end until it has at least ``min_frames`` frames."""
    if len(frames) >= min_frames:
        return frames
    reps = -(-min_frames // len(frames))
    log.info("cyclic padding %d frames -> %d", len(frames), reps * len(frames))
    return np.concatenate([frames] * reps)


# ---------------------------------------------------------------------------
# synthetic walkers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WalkerParams:
    head: float  # head radius / body height
    torso: float  # hip-to-shoulder length / body height
    width: float  # frontal torso width / body height
    depth: float  # sagittal torso depth / body height
    limb: float  # limb radius / body height
    period: float  # frames per gait cycle
    stride: float  # hip swing amplitude (rad)
    arm_swing: float  # shoulder swing amplitude (rad)
    knee: float  # knee flexion amplitude (rad)
    lean: float  # forward lean (rad)


_PARAM_RANGES = {
    "head": (0.050, 0.085),
    "torso": (0.24, 0.36),
    "width": (0.13, 0.26),
    "depth": (0.08, 0.15),
    "limb": (0.030, 0.055),
    "period": (14.0, 24.0),
    "stride": (0.25, 0.55),
    "arm_swing": (0.10, 0.60),
    "knee": (0.2, 0.9),
    "lean": (-0.05, 0.15),
}


def draw_walker(rng: np.random.Generator) -> WalkerParams:
    return WalkerParams(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in _PARAM_RANGES.items()})


def extreme_walkers() -> tuple[WalkerParams, WalkerParams]:
    """Two walkers at opposite corners of the parameter box."""
    lo = WalkerParams(**{k: v[0] for k, v in _PARAM_RANGES.items()})
    hi = WalkerParams(**{k: v[1] for k, v in _PARAM_RANGES.items()})
    return lo, hi


def _capsules(canvas_shape, segments, radii) -> np.ndarray:
    """Union of thick segments (capsules) rasterized on pixel centres."""
    h, w = canvas_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    mask = np.zeros(canvas_shape, dtype=bool)
    for (p, q), r in zip(segments, radii):
        d = q - p
        denom = float(d @ d) or 1e-12
        t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / denom, 0.0, 1.0)
        dx = xx - (p[0] + t * d[0])
        dy = yy - (p[1] + t * d[1])
        mask |= dx * dx + dy * dy <= r * r
    return mask


def render_walker(
    params: WalkerParams,
    view_deg: float,
    n_frames: int,
    phase: float,
    canvas: tuple[int, int] = (128, 96),
    elevation_deg: float = 12.0,
) -> np.ndarray:
    """Render a walking stick-figure silhouette seen from ``view_deg`` (0 = frontal, 90 = side).

    The camera looks down by ``elevation_deg``, so motion towards it shows up as
    vertical image motion (forward leg swing stays visible in frontal views).
    """
    ch, cw = canvas
    height = 0.8 * ch
    ground = 0.9 * ch
    cx = cw / 2.0
    th = np.deg2rad(view_deg)
    su, cu = np.sin(th), np.cos(th)
    el = np.deg2rad(elevation_deg)
    se, ce = np.sin(el), np.cos(el)
    leg = height * (1.0 - params.torso) - 2.2 * params.head * height
    thigh = shin = leg / 2.0
    torso = params.torso * height
    hip_half = 0.35 * params.width * height
    shoulder_half = 0.5 * params.width * height + params.limb * height
    torso_r = 0.5 * (params.width * height * abs(cu) + params.depth * height * abs(su))
    limb_r = params.limb * height
    head_r = params.head * height
    arm = 0.85 * torso

    def project(x, y, z):
        towards = x * cu - z * su
        return np.array([cx + x * su + z * cu, ground - y * ce + towards * se])

    frames = np.zeros((n_frames, ch, cw), dtype=np.uint8)
    for f in range(n_frames):
        w = 2 * np.pi * f / params.period + phase
        hip_y = leg - 0.03 * leg * (1 - np.cos(2 * w))
        segments, radii = [], []
        for side, sgn in ((1.0, 1.0), (-1.0, -1.0)):
            swing = sgn * params.stride * np.sin(w)
            flex = params.knee * max(0.0, np.sin(sgn * w - 0.6))
            hip = np.array([0.0, hip_y, side * hip_half])
            knee = hip + np.array([thigh * np.sin(swing), -thigh * np.cos(swing), 0.0])
            ang = swing - flex
            foot = knee + np.array([shin * np.sin(ang), -shin * np.cos(ang), 0.0])
            segments.append((project(*hip), project(*knee)))
            segments.append((project(*knee), project(*foot)))
            radii += [limb_r * 1.2, limb_r]
            sh = np.array([params.lean * torso, hip_y + torso * 0.92, side * shoulder_half])
            a = -sgn * params.arm_swing * np.sin(w)
            hand = sh + np.array([arm * np.sin(a), -arm * np.cos(a), 0.0])
            segments.append((project(*sh), project(*hand)))
            radii.append(limb_r * 0.85)
        pelvis = np.array([0.0, hip_y, 0.0])
        neck = np.array([params.lean * torso, hip_y + torso, 0.0])
        segments.append((project(*pelvis), project(*neck)))
        radii.append(torso_r)
        head = neck + np.array([params.lean * head_r, 1.1 * head_r, 0.0])
        segments.append((project(*head), project(*head)))
        radii.append(head_r)
        frames[f] = _capsules((ch, cw), segments, radii)
    return frames


def synth_dataset(
    num_subjects: int = 8,
    seqs_per_subject: int = 4,
    views: Sequence[int] = (0, 90),
    seed: int = 0,
    n_frames: int = 40,
    jitter: float = 0.03,
) -> GaitDataset:
    """Deterministic synthetic walkers, one parameter set per subject.

    Conditions are named ``nm-01`` ... and every (subject, condition) pair is
    rendered at every view with its own phase and a small parameter jitter.
    """
    if num_subjects < 2:
        raise DataError(f"need at least 2 subjects, got {num_subjects}")
    rng = np.random.default_rng(seed)
    sequences = []
    for s in range(num_subjects):
        base = draw_walker(rng)
        for q in range(seqs_per_subject):
            for view in views:
                scale = 1.0 + rng.uniform(-jitter, jitter, size=len(_PARAM_RANGES))
                p = WalkerParams(**{k: v * m for (k, v), m in zip(base.__dict__.items(), scale)})
                raw = render_walker(p, view, n_frames, phase=float(rng.uniform(0, 2 * np.pi)))
                key = f"{s:03d}/nm-{q + 1:02d}/{int(view):03d}"
                sequences.append(SilhouetteSequence(f"{s:03d}", f"nm-{q + 1:02d}", int(view), normalize_sequence(raw, key)))
    return GaitDataset(sequences)


def frame_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# storage: root/subject/condition/view/frame_%04d.png + manifest.json
# ---------------------------------------------------------------------------


def save_dataset(dataset: GaitDataset, root, fmt: str = "png") -> Path:
    root = Path(root)
    entries = []
    for seq in dataset:
        rel = Path(seq.subject) / seq.condition / f"{seq.view:03d}"
        d = root / rel
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            Image.fromarray((frame > 0).astype(np.uint8) * 255, mode="L").save(d / f"frame_{i:04d}.{fmt}")
        entries.append(
            {"subject": seq.subject, "condition": seq.condition, "view": seq.view, "path": rel.as_posix(), "frames": len(seq)}
        )
    manifest = {"format": 1, "height": FRAME_HEIGHT, "width": FRAME_WIDTH, "sequences": entries}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _load_frames(d: Path) -> list[np.ndarray]:
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".pgm") and p.stem.startswith("frame_"))
    return [np.asarray(Image.open(p).convert("L")) for p in files]


def load_sequence(directory, subject: str, condition: str, view: int) -> SilhouetteSequence:
    frames = _load_frames(Path(directory))
    key = f"{subject}/{condition}/{view:03d}"
    if not frames:
        raise DataError(f"sequence {key} has no frame files in {directory}")
    if all(f.shape == (FRAME_HEIGHT, FRAME_WIDTH) for f in frames):
        arr = np.stack([_binarize(f) for f in frames]).astype(np.uint8)
        if (arr.reshape(len(arr), -1).max(axis=1) > 0).all():
            return SilhouetteSequence(subject, condition, view, arr)
    return SilhouetteSequence(subject, condition, view, normalize_sequence(frames, key))


def load_dataset(root) -> GaitDataset:
    """Read a dataset directory; uses ``manifest.json`` when present, otherwise walks the tree."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    sequences = []
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        for e in meta["sequences"]:
            try:
                sequences.append(load_sequence(root / e["path"], e["subject"], e["condition"], int(e["view"])))
            except DataError as exc:
                log.warning("rejecting sequence: %s", exc)
        return GaitDataset(sequences)
    for subject in sorted(p for p in root.iterdir() if p.is_dir()):
        for condition in sorted(p for p in subject.iterdir() if p.is_dir()):
            for view in sorted(p for p in condition.iterdir() if p.is_dir()):
                try:
                    sequences.append(load_sequence(view, subject.name, condition.name, int(view.name)))
                except (DataError, ValueError) as exc:
                    log.warning("rejecting sequence %s: %s", view, exc)
    return GaitDataset(sequences)


def default_data_root() -> str | None:
    return os.environ.get("GLGAIT_DATA_ROOT")
