"""Central finite-difference checks of every differentiable layer and loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .losses import CEConfig, TripletConfig, batch_all_triplet, cross_entropy_smooth, loss_terms
from .model import build_model, make_config
from .conv import conv3d
from .tensor import Tensor, record_branches

STEP = 1e-4
LAYER_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def rel_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-8)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = STEP) -> float:
    """Central difference of ``f`` w.r.t. ``arr[index]``, perturbing in place."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class TensorCheck:
    worst: float  # over checked (kink-free) coordinates
    checked: int
    kinked: int  # coordinates whose stencil crossed a kink (excluded when kink-aware)
    worst_raw: float  # over every evaluated coordinate, kinks included


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    max_coords: int | None = None,
    seed: int = 0,
    h: float = STEP,
    kink_aware: bool = False,
) -> dict[str, TensorCheck]:
    """Compare backprop with central differences for every named tensor.

    With ``kink_aware`` the branch decisions of all non-smooth ops are recorded
    at theta - h, theta and theta + h; a coordinate whose stencil changes any
    decision straddles a kink, where a central difference is not an estimate of
    the derivative, so it is replaced by another coordinate of the same tensor.
    """
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    with record_branches() as base:
        loss_fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    rng = np.random.default_rng(seed)

    def probe():
        with record_branches() as log:
            value = float(loss_fn().data)
        probe.smooth = probe.smooth and _same_branches(log, base)
        return value

    out = {}
    for name, t in tensors.items():
        total = t.size
        want = total if max_coords is None else min(max_coords, total)
        order = rng.permutation(total) if want < total or kink_aware else np.arange(total)
        errs, raw, kinked = [], [], 0
        for flat in order:
            if len(errs) >= want:
                break
            idx = np.unravel_index(int(flat), t.shape)
            probe.smooth = True
            e = float(rel_error(analytic[name][idx], numeric_grad(probe, t.data, idx, h)))
            raw.append(e)
            if kink_aware and not probe.smooth:
                kinked += 1
                continue
            errs.append(e)
        out[name] = TensorCheck(max(errs, default=0.0), len(errs), kinked, max(raw, default=0.0))
    return out


@dataclass
class GradCheckResult:
    layer: str
    worst: float
    tol: float
    checked: int = 0
    kinked: int = 0
    worst_raw: float | None = None
    min_checked: int = 1  # fewest kink-free coordinates checked in any one tensor

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tol) and self.min_checked > 0

    @classmethod
    def from_checks(cls, layer: str, checks: dict[str, TensorCheck], tol: float) -> "GradCheckResult":
        vals = checks.values()
        return cls(
            layer,
            max(c.worst for c in vals),
            tol,
            sum(c.checked for c in vals),
            sum(c.kinked for c in vals),
            max(c.worst_raw for c in vals),
            min(c.checked for c in vals),
        )


def _spread(rng, shape) -> np.ndarray:
    """Distinct values at least 0.01 apart, so max-based ops have no near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + 0.05 + rng.uniform(0, 1e-3, n)).reshape(shape) - 0.01 * n / 2


def _projection(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * r).sum()


def _layer_cases(rng: np.random.Generator):
    """Each case draws its own small shapes from ``rng``."""

    def dim(lo, hi):
        return int(rng.integers(lo, hi + 1))

    def conv_case():
        c, o = dim(1, 3), dim(1, 3)
        x = Tensor(rng.standard_normal((dim(1, 2), c, dim(2, 4), dim(2, 5), dim(2, 4))))
        w = Tensor(rng.standard_normal((o, c, 3, 3, 3)) * 0.3)
        b = Tensor(rng.standard_normal(o))
        proj = _projection(conv3d(x, w, b, 1, 1), rng)
        return lambda: proj(conv3d(x, w, b, 1, 1)), {"x": x, "weight": w, "bias": b}

    def lta_case():
        c, o = dim(1, 3), dim(1, 3)
        cfg = L.LTAConfig(c, o)
        x = Tensor(rng.standard_normal((dim(1, 2), c, dim(3, 9), dim(1, 3), dim(1, 3))))
        w = Tensor(rng.standard_normal((o, c, 3, 1, 1)))
        b = Tensor(rng.standard_normal(o))
        proj = _projection(L.lta_forward(x, cfg, w, b), rng)
        return lambda: proj(L.lta_forward(x, cfg, w, b)), {"x": x, "weight": w, "bias": b}

    def glconv_case(combine):
        def case():
            c, o, n = dim(1, 2), dim(1, 2), dim(1, 3)
            cfg = L.GLConvConfig(c, o, n_parts=n, combine=combine)
            x = Tensor(rng.standard_normal((1, c, dim(1, 3), n * dim(1, 2), dim(2, 3))))
            ws = {k: Tensor(rng.standard_normal((o, c, 3, 3, 3)) * 0.3) for k in ("global_weight", "local_weight")}
            bs = {k: Tensor(rng.standard_normal(o)) for k in ("global_bias", "local_bias")}

            def fwd():
                return L.glconv_forward(x, cfg, ws["global_weight"], bs["global_bias"], ws["local_weight"], bs["local_bias"])

            proj = _projection(fwd(), rng)
            return lambda: proj(fwd()), {"x": x, **ws, **bs}

        return case

    def spatial_pool_case():
        x = Tensor(_spread(rng, (dim(1, 2), dim(1, 2), dim(1, 2), 2 * dim(1, 3), 2 * dim(1, 3))))
        proj = _projection(L.spatial_max_pool(x), rng)
        return lambda: proj(L.spatial_max_pool(x)), {"x": x}

    def temporal_pool_case():
        x = Tensor(_spread(rng, (dim(1, 2), dim(1, 3), dim(1, 6), dim(1, 3), dim(1, 3))))
        proj = _projection(L.temporal_pool(x), rng)
        return lambda: proj(L.temporal_pool(x)), {"x": x}

    def gem_case():
        x = Tensor(rng.uniform(0.2, 1.5, (dim(1, 2), dim(1, 3), 1, dim(1, 4), dim(2, 6))))
        p = Tensor(np.array([rng.uniform(1.5, 7.0)]))
        proj = _projection(L.gem_pool(x, p), rng)
        return lambda: proj(L.gem_pool(x, p)), {"x": x, "p": p}

    def fc_case():
        n, c, s, d = dim(1, 3), dim(1, 4), dim(1, 3), dim(1, 3)
        x = Tensor(rng.standard_normal((n, c, 1, s, 1)))
        w = Tensor(rng.standard_normal((s, c, d)))
        proj = _projection(L.separate_fc(x, w), rng)
        return lambda: proj(L.separate_fc(x, w)), {"x": x, "weight": w}

    labels = np.repeat(np.arange(dim(2, 3)), dim(2, 3))
    n = len(labels)

    def triplet_case():
        e = Tensor(rng.standard_normal((n, dim(1, 3), dim(2, 4))) * 0.3)
        return lambda: batch_all_triplet(e, labels, TripletConfig(0.2)), {"embeddings": e}

    def ce_case():
        s, d, k = dim(1, 3), dim(2, 4), int(labels.max()) + 1 + dim(0, 2)
        e = Tensor(rng.standard_normal((n, s, d)))
        w = Tensor(rng.standard_normal((s, d, k)))
        cfg = CEConfig(k, 0.1)
        return lambda: cross_entropy_smooth(e, labels, cfg, w), {"embeddings": e, "weight": w}

    return {
        "conv3d": conv_case,
        "lta": lta_case,
        "glconv_a": glconv_case(L.Combine.ADD),
        "glconv_b": glconv_case(L.Combine.CONCAT),
        "spatial_pool": spatial_pool_case,
        "temporal_pool": temporal_pool_case,
        "gem": gem_case,
        "separate_fc": fc_case,
        "triplet_loss": triplet_case,
        "cross_entropy": ce_case,
    }


LAYERS = tuple(_layer_cases(np.random.default_rng(0)))


def check_layer(name: str, seed: int = 0) -> GradCheckResult:
    loss_fn, tensors = _layer_cases(np.random.default_rng(seed))[name]()
    return GradCheckResult.from_checks(name, check_gradients(loss_fn, tensors, seed=seed), LAYER_TOL)


def check_composite(
    preset: str = "casia-b-tiny",
    coords_per_param: int = 6,
    seed: int = 0,
    frame: tuple[int, int] = (16, 8),
) -> GradCheckResult:
    """Full preset stack (every layer, triplet + smoothed CE) on a small float64 batch.

    ``frame`` shrinks the silhouette so that fewer units sit within one step of a
    kink; coordinates whose stencil still crosses one are replaced (see
    :func:`check_gradients`).
    """
    rng = np.random.default_rng(seed)
    h, w = frame
    cfg = make_config(preset, num_classes=2, input_height=h, input_width=w)
    model = build_model(cfg, seed=seed).astype(np.float64)
    clips = rng.uniform(0, 1, (4, 1, model.min_frames, h, w))
    labels = np.array([0, 0, 1, 1])
    trip, ce = TripletConfig(0.2), CEConfig(2, 0.1)

    def loss():
        return loss_terms(model(clips), labels, trip, ce, model.head).total

    checks = check_gradients(loss, dict(model.named_parameters()), coords_per_param, seed, kink_aware=True)
    return GradCheckResult.from_checks(f"{preset} end-to-end", checks, COMPOSITE_TOL)


def run_all(preset: str = "casia-b-tiny", seed: int = 0) -> list[GradCheckResult]:
    results = [check_layer(name, seed) for name in LAYERS]
    results.append(check_composite(preset, seed=seed))
    return results
