"""Dense n-d arrays with tape-free reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the recorded graph in reverse topological order.  Feature maps use the
(N, C, T, H, W) layout throughout the package; the helpers here are
rank-agnostic so losses can work on (N, strips, channels) arrays too.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


_branch_log: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (sign masks, argmax winners) made by non-smooth ops.

    Two evaluations with equal logs lie on the same smooth piece of the function.
    """
    global _branch_log
    prev = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(decision, copy=True))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Iterable["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        parents = tuple(parents)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        Only scalar outputs may be differentiated without an explicit seed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other) -> "Tensor":
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return max_over_axis(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ConfigurationError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ConfigurationError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ConfigurationError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(out, (a, b), backward)


def power(x: Tensor, exponent) -> Tensor:
    """``x ** exponent``; the exponent may itself be a (broadcastable) Tensor.

    The gradient with respect to a tensor exponent uses ``log(x)`` and is
    therefore only meaningful for positive bases (see :func:`clamp_min`).
    """
    if not isinstance(exponent, Tensor):
        e = float(exponent)
        out = x.data ** e
        xd = x.data
        return Tensor._make(out, (x,), lambda g: (g * e * xd ** (e - 1.0),))
    xd, ed = x.data, exponent.data
    out = xd ** ed

    def backward(g):
        gx = _unbroadcast(g * ed * xd ** (ed - 1.0), xd.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            ge = np.where(xd > 0, g * out * np.log(np.where(xd > 0, xd, 1.0)), 0.0)
        return gx, _unbroadcast(ge, ed.shape)

    return Tensor._make(out, (x, exponent), backward)


def clamp_min(x: Tensor, eps: float) -> Tensor:
    mask = x.data > eps
    note_branch(mask)
    out = np.where(mask, x.data, np.asarray(eps, dtype=x.dtype))
    return Tensor._make(out, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    note_branch(pos)
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    note_branch(pos)
    return Tensor._make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient at 0 is taken to be 0 (zero distances stay finite)."""
    out = np.sqrt(x.data)
    note_branch(out > 0)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g * 0.5 / np.where(out > 0, out, 1.0), 0.0).astype(x.dtype),)

    return Tensor._make(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- reductions -------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in axes:
            _check_axis(x, a)
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def max_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; ties send the whole gradient to the lowest index."""
    axis = _check_axis(x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    note_branch(idx)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return Tensor._make(out if keepdims else np.squeeze(out, axis), (x,), backward)


def mean_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return mean(x, _check_axis(x, axis), keepdims)


# -- shape manipulation -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigurationError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._make(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigurationError("concat needs at least one tensor")
    axis = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ConfigurationError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = _check_axis(x, axis)
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ConfigurationError(
            f"slice [{start}, {start + length}) out of bounds for axis {axis} of size {x.shape[axis]}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return Tensor._make(x.data[index], (x,), backward)


def concat_along_height(tensors: Sequence[Tensor]) -> Tensor:
    """Stack (N, C, T, H_i, W) maps on the H axis."""
    for t in tensors:
        if t.ndim != 5:
            raise ConfigurationError(f"expected a 5-d feature map, got shape {t.shape}")
    return concat(tensors, axis=3)


def slice_height(x: Tensor, start: int, length: int) -> Tensor:
    if x.ndim != 5:
        raise ConfigurationError(f"expected a 5-d feature map, got shape {x.shape}")
    return slice_axis(x, 3, start, length)


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over identical leading dimensions (no broadcasting)."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    out = ad @ bd
    return Tensor._make(
        out, (a, b), lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)
    )


def max_pool_hw(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` spatial max pool on (N, C, T, H, W).

    Ties route the gradient to the lowest linear index inside each window.
    """
    if x.ndim != 5:
        raise ConfigurationError(f"expected a 5-d feature map, got shape {x.shape}")
    n, c, t, h, w = x.shape
    if h % size or w % size:
        raise ConfigurationError(f"spatial max pool needs H and W divisible by {size}, got H={h}, W={w}")
    ho, wo = h // size, w // size
    win = (
        x.data.reshape(n, c, t, ho, size, wo, size)
        .transpose(0, 1, 2, 3, 5, 4, 6)
        .reshape(n, c, t, ho, wo, size * size)
    )
    idx = np.argmax(win, axis=-1)[..., None]
    note_branch(idx)
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(n, c, t, ho, wo, size, size).transpose(0, 1, 2, 3, 5, 4, 6).reshape(x.shape)
        return (gx,)

    return Tensor._make(out, (x,), backward)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def astype(x: Tensor, dtype) -> Tensor:
    """Differentiable dtype cast; the gradient is cast back to the source dtype."""
    src = x.dtype
    if np.dtype(dtype) == src:
        return x
    return Tensor._make(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))
