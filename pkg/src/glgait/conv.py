"""3-D cross-correlation over (T, H, W) with im2col + BLAS matmul."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputTooSmallError
from .tensor import Tensor, is_grad_enabled

_AXES = ("T", "H", "W")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigurationError(f"expected 3 values for (T, H, W), got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"channel counts must be >= 1, got {self.in_channels}->{self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError(
                f"invalid conv geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_dims(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        dims = []
        for axis, size, k, s, p in zip(_AXES, (t, h, w), self.kernel, self.stride, self.padding):
            out = (size + 2 * p - k) // s + 1
            if out < 1:
                raise InputTooSmallError(
                    f"conv3d: axis {axis} of size {size} is too small for kernel {k} with padding {p}"
                )
            dims.append(out)
        return tuple(dims)


def _axis_slice(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride, padding, keep_cols=False):
    """Return the (N, O, T', H', W') output and, optionally, the column matrix for backward.

    Columns are laid out (C*kt*kh*kw, N*T'*H'*W') so each window copy moves
    contiguous W-runs; this is markedly faster than a channels-last im2col
    when C is small, as it is in the early layers.
    """
    n, c, t, h, wd = x.shape
    o = w.shape[0]
    kt, kh, kw = w.shape[2:]
    pt, ph, pw = padding
    st, sh, sw = stride
    to, ho, wo = (
        (size + 2 * p - k) // s + 1 for size, k, s, p in zip((t, h, wd), (kt, kh, kw), stride, padding)
    )
    xp = np.zeros((c, n, t + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd] = x.transpose(1, 0, 2, 3, 4)
    cols = np.empty((c, kt, kh, kw, n, to, ho, wo), dtype=x.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                cols[:, i, j, k] = xp[:, :, _axis_slice(i, st, to), _axis_slice(j, sh, ho), _axis_slice(k, sw, wo)]
    cols = cols.reshape(c * kt * kh * kw, -1)
    out = w.reshape(o, -1) @ cols
    if b is not None:
        out += b[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, to, ho, wo).transpose(1, 0, 2, 3, 4))
    return out, (cols if keep_cols else None)


def conv3d_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, stride, padding, need_input=True):
    n, c, t, h, wd = x_shape
    o = w.shape[0]
    kt, kh, kw = w.shape[2:]
    to, ho, wo = g.shape[2:]
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(o, -1)
    gw = (gt @ cols.T).reshape(w.shape)
    gb = gt.sum(axis=1)
    if not need_input:
        return None, gw, gb

    pt, ph, pw = padding
    st, sh, sw = stride
    dcols = (w.reshape(o, -1).T @ gt).reshape(c, kt, kh, kw, n, to, ho, wo)
    gxp = np.zeros((c, n, t + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                gxp[:, :, _axis_slice(i, st, to), _axis_slice(j, sh, ho), _axis_slice(k, sw, wo)] += dcols[:, i, j, k]
    gx = np.ascontiguousarray(gxp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3, 4))
    return gx, gw, gb


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate (N, C, T, H, W) ``x`` with (O, C, kt, kh, kw) ``weight``.

    Zero padding; output dims are ``floor((L + 2p - k) / s) + 1`` per axis.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise ConfigurationError(f"conv3d expects (N, C, T, H, W), got shape {x.shape}")
    if weight.ndim != 5:
        raise ConfigurationError(f"conv3d weight must be (O, C, kt, kh, kw), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"conv3d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
    spec = ConvSpec(weight.shape[1], weight.shape[0], weight.shape[2:], stride, padding, bias is not None)
    spec.output_dims(*x.shape[2:])

    parents = (x, weight) if bias is None else (x, weight, bias)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out, cols = conv3d_forward(
        x.data, weight.data, None if bias is None else bias.data, stride, padding, keep_cols=track
    )
    x_shape, wd = x.shape, weight.data

    def backward(g):
        gx, gw, gb = conv3d_backward(g, cols, wd, x_shape, stride, padding, need_input=x.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, backward)
