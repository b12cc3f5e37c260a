"""Network assembly from declarative layer stacks.

A :class:`ModelConfig` is a plain list of :class:`LayerSpec` entries.  The
presets reproduce the two published stacks (CASIA-B and OUMVLP) and the
ablation variants: branch switches, part counts, the spatial mapping used
after temporal pooling, and where the two downsampling steps go.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layers as L
from .conv import ConvSpec
from .errors import ConfigurationError, InputTooSmallError
from .tensor import Tensor, no_grad

KINDS = ("conv3d", "lta", "glconv_a", "glconv_b", "maxpool", "temporal_pool", "mapping", "separate_fc")
MAPPINGS = ("gem", "max", "avg", "max+avg")
ORDERINGS = ("LTA+SP", "SP+SP", "SP+LTA", "LTA+LTA")
PRESETS = ("casia-b", "casia-b-tiny", "oumvlp")

# predefined weights for the fixed max/avg mappings
_MAPPING_WEIGHTS = {"max": (1.0, 0.0), "avg": (0.0, 1.0), "max+avg": (1.0, 1.0)}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    n_parts: int = 1
    global_on: bool = True
    local_on: bool = True
    mapping: str = "gem"
    strips: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "mapping" and self.mapping not in MAPPINGS:
            raise ConfigurationError(f"unknown mapping {self.mapping!r}; expected one of {MAPPINGS}")


@dataclass(frozen=True)
class ModelConfig:
    preset: str
    layers: tuple[LayerSpec, ...]
    input_height: int = 64
    input_width: int = 44
    num_classes: int = 0  # 0 disables the cross-entropy head
    gem_p0: float = 6.5
    gem_eps: float = L.DEFAULT_GEM_EPS
    leaky_slope: float = L.DEFAULT_LEAKY_SLOPE
    bias: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(s) for s in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**s) for s in d["layers"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def strips(self) -> int:
        return self.layers[-1].strips

    @property
    def embedding_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def embedding_dim(self) -> int:
        return self.strips * self.embedding_channels


@dataclass(frozen=True)
class ShapeReport:
    """Result of shape propagation; ``min_frames`` is the shortest legal clip."""

    strips: int
    channels: int
    min_frames: int
    per_layer: list = field(default_factory=list)


def validate(cfg: ModelConfig) -> ShapeReport:
    """Propagate (C, H, W) through the stack; raise naming the first bad layer."""
    last = cfg.layers[-1] if cfg.layers else None
    if last is None or last.kind != "separate_fc":
        raise ConfigurationError("the stack must end with a separate_fc layer")
    return _propagate(cfg.layers, cfg.input_height, cfg.input_width)


def _propagate(layer_specs, h: int, w: int) -> ShapeReport:
    c = 1
    ltas = 0
    per_layer = []
    pooled_t = pooled_w = False
    for i, s in enumerate(layer_specs):
        where = f"layer {i} ({s.kind})"
        if s.kind in ("conv3d", "lta", "glconv_a", "glconv_b", "separate_fc") and s.in_channels != c:
            raise ConfigurationError(f"{where}: expects {s.in_channels} input channels but receives {c}")
        if s.kind in ("conv3d", "lta", "glconv_a", "glconv_b") and s.out_channels < 1:
            raise ConfigurationError(f"{where}: out_channels must be >= 1")
        if s.kind in ("conv3d", "lta", "glconv_a", "glconv_b", "maxpool") and pooled_t:
            raise ConfigurationError(f"{where}: must come before temporal pooling")
        if s.kind == "conv3d":
            c = s.out_channels
        elif s.kind == "lta":
            c = s.out_channels
            ltas += 1
        elif s.kind in ("glconv_a", "glconv_b"):
            if s.n_parts < 1 or h % s.n_parts:
                raise ConfigurationError(f"{where}: height {h} is not divisible by n_parts={s.n_parts}")
            if not (s.global_on or s.local_on):
                raise ConfigurationError(f"{where}: both branches disabled")
            c = s.out_channels
            if s.kind == "glconv_b":
                h *= 2
        elif s.kind == "maxpool":
            if h % 2 or w % 2:
                raise ConfigurationError(f"{where}: spatial max pool needs even H and W, got {h}x{w}")
            h, w = h // 2, w // 2
        elif s.kind == "temporal_pool":
            pooled_t = True
        elif s.kind == "mapping":
            if not pooled_t:
                raise ConfigurationError(f"{where}: mapping requires temporal pooling first")
            pooled_w = True
            w = 1
        elif s.kind == "separate_fc":
            if not pooled_w:
                raise ConfigurationError(f"{where}: separate FC requires the spatial mapping first")
            if s.strips != h:
                raise ConfigurationError(f"{where}: configured for {s.strips} strips but receives {h}")
            c = s.out_channels
        per_layer.append((s.kind, c, h, w))
    min_frames = 1
    for _ in range(ltas):
        # smallest T whose LTA output is >= the current minimum
        min_frames = 3 + 3 * (min_frames - 1)
    return ShapeReport(strips=h, channels=c, min_frames=min_frames, per_layer=per_layer)


def _stack(
    preset: str,
    stem: list[int],
    blocks_a: list[tuple[int, int]],
    blocks_b: list[tuple[int, int]],
    final: tuple[int, int],
    n_parts: int,
    global_on: bool,
    local_on: bool,
    mapping: str,
    ordering: str,
    head: int,
):
    """Assemble Conv3d stem, 1st downsampling, GLConvA blocks, 2nd downsampling, tail."""
    if ordering not in ORDERINGS:
        raise ConfigurationError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    first, second = ordering.split("+")
    layers = []
    c = 1
    for out in stem:
        layers.append(LayerSpec("conv3d", c, out))
        c = out

    def down(kind):
        if kind == "LTA":
            return LayerSpec("lta", c, c)
        return LayerSpec("maxpool")

    gl = dict(n_parts=n_parts, global_on=global_on, local_on=local_on)
    layers.append(down(first))
    for cin, cout in blocks_a:
        layers.append(LayerSpec("glconv_a", cin, cout, **gl))
        c = cout
    layers.append(down(second))
    for cin, cout in blocks_b:
        layers.append(LayerSpec("glconv_a", cin, cout, **gl))
        c = cout
    layers.append(LayerSpec("glconv_b", final[0], final[1], **gl))
    layers.append(LayerSpec("temporal_pool"))
    layers.append(LayerSpec("mapping", mapping=mapping))
    layers.append(LayerSpec("separate_fc", final[1], head, strips=0))
    return layers


def make_config(
    preset: str = "casia-b",
    *,
    n_parts: int = 8,
    global_branch: bool = True,
    local_branch: bool = True,
    mapping: str = "gem",
    ordering: str = "LTA+SP",
    num_classes: int | None = None,
    input_height: int = 64,
    input_width: int = 44,
    gem_p0: float = 6.5,
) -> ModelConfig:
    """Build a preset stack, optionally with ablation switches applied.

    ``casia-b-tiny`` divides every channel count of ``casia-b`` by 8.
    The CASIA-B table prints the first GLConvA as 32->32 followed by 64->128;
    32->64 is used so the channel chain is consistent.
    """
    if preset in ("casia-b", "casia-b-tiny"):
        d = 8 if preset == "casia-b-tiny" else 1
        layers = _stack(
            preset,
            stem=[32 // d],
            blocks_a=[(32 // d, 64 // d)],
            blocks_b=[(64 // d, 128 // d)],
            final=(128 // d, 128 // d),
            n_parts=n_parts,
            global_on=global_branch,
            local_on=local_branch,
            mapping=mapping,
            ordering=ordering,
            head=128 // d,
        )
        default_classes = 74
    elif preset == "oumvlp":
        layers = _stack(
            preset,
            stem=[32, 32],
            blocks_a=[(32, 64), (64, 64)],
            blocks_b=[(64, 128), (128, 128), (128, 256)],
            final=(256, 256),
            n_parts=n_parts,
            global_on=global_branch,
            local_on=local_branch,
            mapping=mapping,
            ordering=ordering,
            head=256,
        )
        default_classes = 5153
    else:
        raise ConfigurationError(f"unknown preset {preset!r}; expected one of {PRESETS}")

    cfg = ModelConfig(
        preset=preset,
        layers=tuple(layers),
        input_height=input_height,
        input_width=input_width,
        num_classes=default_classes if num_classes is None else num_classes,
        gem_p0=gem_p0,
    )
    # the separate FC gets one weight matrix per strip reaching it
    strips = _propagate(cfg.layers[:-1], input_height, input_width).strips
    cfg = replace(cfg, layers=cfg.layers[:-1] + (replace(cfg.layers[-1], strips=strips),))
    validate(cfg)
    return cfg


class GaitNet(L.Module):
    """Silhouette clips (N, 1, T, H, W) -> strip embeddings (N, H2, C4)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        report = validate(cfg)
        self.cfg = cfg
        self.min_frames = report.min_frames
        rng = np.random.default_rng(seed)
        body = []
        for s in cfg.layers:
            body.extend(self._make(s, cfg, rng))
        self.body = L.Sequential(*body)
        if cfg.num_classes:
            self.head = L.Parameter(
                L.uniform_init(rng, (cfg.strips, cfg.embedding_channels, cfg.num_classes), cfg.embedding_channels)
            )
        else:
            self.head = None

    @staticmethod
    def _make(s: LayerSpec, cfg: ModelConfig, rng) -> list[L.Module]:
        act = L.LeakyReLU(cfg.leaky_slope)
        if s.kind == "conv3d":
            spec = ConvSpec(s.in_channels, s.out_channels, (3, 3, 3), (1, 1, 1), (1, 1, 1), cfg.bias)
            return [L.Conv3d(spec, rng), act]
        if s.kind == "lta":
            return [L.LTA(L.LTAConfig(s.in_channels, s.out_channels), rng, cfg.bias), act]
        if s.kind in ("glconv_a", "glconv_b"):
            gl = L.GLConvConfig(
                s.in_channels,
                s.out_channels,
                s.n_parts,
                L.Combine.ADD if s.kind == "glconv_a" else L.Combine.CONCAT,
                s.global_on,
                s.local_on,
                cfg.bias,
            )
            return [L.GLConv(gl, rng), act]
        if s.kind == "maxpool":
            return [L.SpatialMaxPool()]
        if s.kind == "temporal_pool":
            return [L.TemporalPool()]
        if s.kind == "mapping":
            if s.mapping == "gem":
                return [L.GeM(L.GeMConfig(cfg.gem_p0, cfg.gem_eps))]
            return [L.WeightedSumMap(*_MAPPING_WEIGHTS[s.mapping])]
        if s.kind == "separate_fc":
            return [L.SeparateFC(s.strips, s.in_channels, s.out_channels, rng)]
        raise ConfigurationError(f"unknown layer kind {s.kind!r}")  # pragma: no cover

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, clips) -> Tensor:
        x = clips if isinstance(clips, Tensor) else Tensor(clips)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ConfigurationError(f"expected clips shaped (N, 1, T, H, W), got {x.shape}")
        if x.shape[3:] != (self.cfg.input_height, self.cfg.input_width):
            raise ConfigurationError(
                f"frames must be {self.cfg.input_height}x{self.cfg.input_width}, got {x.shape[3]}x{x.shape[4]}"
            )
        if x.shape[2] < self.min_frames:
            raise InputTooSmallError(f"clips need at least {self.min_frames} frames, got T={x.shape[2]}")
        out = self.body(x)  # (N, C4, H2)
        return out.transpose(0, 2, 1)

    def embed(self, clips) -> np.ndarray:
        """Flattened strip-major embeddings: row = [strip0 channels..., strip1 channels..., ...]."""
        with no_grad():
            strips = self.forward(clips).data
        return strips.reshape(strips.shape[0], -1)


def build_model(cfg: ModelConfig, seed: int = 0) -> GaitNet:
    return GaitNet(cfg, seed)
