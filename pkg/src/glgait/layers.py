"""Differentiable building blocks of the global-local gait network.

Functional forms (``lta_forward``, ``glconv_forward``, ``gem_pool`` ...) take
explicit weights so they can be checked against oracles in isolation; the
``Module`` subclasses own their parameters and are what the model stacks.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as tf
from .conv import ConvSpec, conv3d
from .errors import ConfigurationError, InputTooSmallError, ParameterDomainError
from .tensor import Tensor

DEFAULT_GEM_EPS = 1e-6
DEFAULT_LEAKY_SLOPE = 0.01


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data), requires_grad=True, name=name)


class Module:
    """Minimal parameter container; attributes holding Parameters or Modules are registered."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.weight = Parameter(uniform_init(rng, spec.weight_shape, fan_in))
        if spec.bias:
            self.bias = Parameter(uniform_init(rng, (spec.out_channels,), fan_in))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


@dataclass(frozen=True)
class LTAConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3  # temporal extent a
    stride: int = 3  # temporal stride b

    def conv_spec(self, bias: bool = True) -> ConvSpec:
        return ConvSpec(
            self.in_channels, self.out_channels, (self.kernel, 1, 1), (self.stride, 1, 1), (0, 0, 0), bias
        )

    def output_frames(self, t: int) -> int:
        return (t - self.kernel) // self.stride + 1


def lta_forward(x: Tensor, cfg: LTAConfig, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Local temporal aggregation: strided temporal conv, spatial dims untouched."""
    if x.ndim == 5 and x.shape[2] < cfg.kernel:
        raise InputTooSmallError(f"LTA needs at least {cfg.kernel} frames, got T={x.shape[2]}")
    return conv3d(x, weight, bias, stride=(cfg.stride, 1, 1), padding=0)


class LTA(Module):
    def __init__(self, cfg: LTAConfig, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.cfg = cfg
        self.conv = Conv3d(cfg.conv_spec(bias), rng)

    def forward(self, x: Tensor) -> Tensor:
        return lta_forward(x, self.cfg, self.conv.weight, self.conv.bias)


class Combine(str, Enum):
    ADD = "add"  # GLConvA
    CONCAT = "concat"  # GLConvB


@dataclass(frozen=True)
class GLConvConfig:
    in_channels: int
    out_channels: int
    n_parts: int = 8
    combine: Combine = Combine.ADD
    global_on: bool = True
    local_on: bool = True
    bias: bool = True

    def __post_init__(self):
        if self.n_parts < 1:
            raise ConfigurationError(f"n_parts must be >= 1, got {self.n_parts}")
        if not (self.global_on or self.local_on):
            raise ConfigurationError("GLConv needs at least one active branch")

    def conv_spec(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, (3, 3, 3), (1, 1, 1), (1, 1, 1), self.bias)

    def output_height(self, h: int) -> int:
        return 2 * h if self.combine is Combine.CONCAT else h


def local_branch(x: Tensor, n_parts: int, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Convolve each of ``n_parts`` horizontal bands separately with one shared kernel.

    Bands are folded into the batch axis so one convolution call handles all of
    them; each band is zero-padded on its own, exactly as if sliced out first.
    """
    n, c, t, h, w = x.shape
    hp = h // n_parts
    parts = x.reshape(n, c, t, n_parts, hp, w).transpose(0, 3, 1, 2, 4, 5).reshape(n * n_parts, c, t, hp, w)
    y = conv3d(parts, weight, bias, stride=1, padding=1)
    o = y.shape[1]
    return y.reshape(n, n_parts, o, t, hp, w).transpose(0, 2, 3, 1, 4, 5).reshape(n, o, t, h, w)


def glconv_forward(
    x: Tensor,
    cfg: GLConvConfig,
    global_weight: Tensor | None,
    global_bias: Tensor | None,
    local_weight: Tensor | None,
    local_bias: Tensor | None,
) -> Tensor:
    """Global whole-map conv combined with part-wise shared-weight convs (pre-activation)."""
    if x.ndim != 5:
        raise ConfigurationError(f"GLConv expects (N, C, T, H, W), got {x.shape}")
    if x.shape[3] % cfg.n_parts:
        raise ConfigurationError(f"GLConv: height {x.shape[3]} is not divisible by n_parts={cfg.n_parts}")
    y_global = conv3d(x, global_weight, global_bias, stride=1, padding=1) if cfg.global_on else None
    y_local = local_branch(x, cfg.n_parts, local_weight, local_bias) if cfg.local_on else None

    if cfg.combine is Combine.ADD:
        if y_global is None:
            return y_local
        if y_local is None:
            return y_global
        return y_global + y_local
    live = y_global if y_global is not None else y_local
    zeros = Tensor(np.zeros(live.shape, dtype=live.dtype))
    return tf.concat_along_height(
        [y_global if y_global is not None else zeros, y_local if y_local is not None else zeros]
    )


class GLConv(Module):
    def __init__(self, cfg: GLConvConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        spec = cfg.conv_spec()
        self.global_conv = Conv3d(spec, rng) if cfg.global_on else None
        self.local_conv = Conv3d(spec, rng) if cfg.local_on else None

    def forward(self, x: Tensor) -> Tensor:
        g, l = self.global_conv, self.local_conv
        return glconv_forward(
            x,
            self.cfg,
            g.weight if g else None,
            g.bias if g else None,
            l.weight if l else None,
            l.bias if l else None,
        )


# ---------------------------------------------------------------------------
# pooling and mapping
# ---------------------------------------------------------------------------


def spatial_max_pool(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2 over (H, W); T untouched."""
    return tf.max_pool_hw(x, 2)


def temporal_pool(x: Tensor) -> Tensor:
    """Max over frames: (N, C, T, H, W) -> (N, C, 1, H, W)."""
    if x.ndim != 5:
        raise ConfigurationError(f"temporal pooling expects (N, C, T, H, W), got {x.shape}")
    return tf.max_over_axis(x, 2, keepdims=True)


def _require_single_frame(y: Tensor, what: str) -> None:
    if y.ndim != 5 or y.shape[2] != 1:
        raise ConfigurationError(f"{what} expects a temporally pooled (N, C, 1, H, W) map, got {y.shape}")


def weighted_sum_map(y_tp: Tensor, alpha: float, beta: float) -> Tensor:
    """``alpha * max_W + beta * mean_W`` with fixed weights: (N, C, 1, H, W) -> (N, C, 1, H, 1)."""
    _require_single_frame(y_tp, "weighted_sum_map")
    parts = []
    if alpha:
        parts.append(tf.max_over_axis(y_tp, 4, keepdims=True) * alpha)
    if beta:
        parts.append(tf.mean_over_axis(y_tp, 4, keepdims=True) * beta)
    if not parts:
        raise ConfigurationError("weighted_sum_map needs alpha or beta to be non-zero")
    out = parts[0]
    for extra in parts[1:]:
        out = out + extra
    return out


@dataclass(frozen=True)
class GeMConfig:
    p_init: float = 6.5
    clamp_eps: float = DEFAULT_GEM_EPS

    def __post_init__(self):
        if self.clamp_eps <= 0:
            raise ConfigurationError(f"GeM clamp_eps must be > 0, got {self.clamp_eps}")
        if self.p_init <= 0:
            raise ParameterDomainError(f"GeM exponent must be > 0, got {self.p_init}")


def gem_pool(y_tp: Tensor, p: Tensor, eps: float = DEFAULT_GEM_EPS) -> Tensor:
    """Generalized mean over W: ``mean_W(clamp(v, eps) ** p) ** (1 / p)``.

    Evaluated in float64 whatever the input dtype: ``eps ** p`` underflows in
    float32 for p above ~7.5, which would turn the backward pass into NaN.
    """
    _require_single_frame(y_tp, "gem_pool")
    if np.any(p.data <= 0):
        raise ParameterDomainError(f"GeM exponent must be > 0, got {p.data.ravel()}")
    x64 = tf.astype(y_tp, np.float64)
    p64 = tf.astype(p, np.float64)
    pooled = tf.mean_over_axis(tf.clamp_min(x64, eps) ** p64, 4, keepdims=True)
    return tf.astype(pooled ** tf.power(p64, -1.0), y_tp.dtype)


def separate_fc(y: Tensor, weight: Tensor) -> Tensor:
    """Independent per-strip linear maps: (N, C3, 1, H2, 1) x (H2, C3, C4) -> (N, C4, H2)."""
    if y.ndim != 5 or y.shape[2] != 1 or y.shape[4] != 1:
        raise ConfigurationError(f"separate_fc expects (N, C3, 1, H2, 1), got {y.shape}")
    n, c3, _, h2, _ = y.shape
    if weight.ndim != 3 or weight.shape[0] != h2 or weight.shape[1] != c3:
        raise ConfigurationError(
            f"separate_fc: weights {weight.shape} do not match {h2} strips of {c3} channels"
        )
    strips = y.reshape(n, c3, h2).transpose(2, 0, 1)  # (H2, N, C3)
    return tf.matmul(strips, weight).transpose(1, 2, 0)


class LeakyReLU(Module):
    def __init__(self, slope: float = DEFAULT_LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return tf.leaky_relu(x, self.slope)


class SpatialMaxPool(Module):
    def forward(self, x):
        return spatial_max_pool(x)


class TemporalPool(Module):
    def forward(self, x):
        return temporal_pool(x)


class WeightedSumMap(Module):
    def __init__(self, alpha: float, beta: float):
        super().__init__()
        self.alpha, self.beta = alpha, beta

    def forward(self, x):
        return weighted_sum_map(x, self.alpha, self.beta)


class GeM(Module):
    def __init__(self, cfg: GeMConfig = GeMConfig()):
        super().__init__()
        self.cfg = cfg
        self.p = Parameter(np.array([cfg.p_init]))

    def forward(self, x):
        return gem_pool(x, self.p, self.cfg.clamp_eps)


class SeparateFC(Module):
    def __init__(self, strips: int, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, (strips, in_channels, out_channels), in_channels))

    def forward(self, y):
        return separate_fc(y, self.weight)
