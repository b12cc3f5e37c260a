"""Adam with decoupled weight decay, milestone schedules, and the training loop."""
from __future__ import annotations

import fnmatch
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import GaitDataset, SamplerConfig, load_dataset, sample_batch, synth_dataset
from .errors import CheckpointError, TrainingHalted
from .losses import CEConfig, TripletConfig, loss_terms
from .model import GaitNet, ModelConfig, build_model, make_config

log = logging.getLogger(__name__)

LOG_HEADER = "iteration,L_tri,L_cse,lr"


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant values keyed by the iteration at which they take effect."""

    lr: tuple[tuple[int, float], ...] = ((0, 1e-4),)
    weight_decay: tuple[tuple[int, float], ...] = ((0, 0.0),)
    total: int = 0

    def __post_init__(self):
        for name, ms in (("lr", self.lr), ("weight_decay", self.weight_decay)):
            its = [i for i, _ in ms]
            if not its or its[0] != 0 or any(b <= a for a, b in zip(its, its[1:])):
                raise ValueError(f"{name} milestones must start at 0 and strictly increase, got {its}")

    @staticmethod
    def _at(ms, iteration: int) -> float:
        value = ms[0][1]
        for start, v in ms:
            if iteration >= start:
                value = v
        return value

    def lr_at(self, iteration: int) -> float:
        return self._at(self.lr, iteration)

    def weight_decay_at(self, iteration: int) -> float:
        return self._at(self.weight_decay, iteration)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Schedule":
        return cls(
            tuple((int(i), float(v)) for i, v in cfg.optim.lr),
            tuple((int(i), float(v)) for i, v in cfg.optim.weight_decay),
            cfg.iterations,
        )


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, no_decay=()):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.no_decay = tuple(no_decay)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def decays(self, name: str) -> bool:
        return not any(fnmatch.fnmatchcase(name, pat) for pat in self.no_decay)

    def step(self, t: int, lr: float, weight_decay: float = 0.0) -> None:
        """One update with step count ``t`` (1-based) for bias correction."""
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingHalted(f"non-finite gradient in parameter {name!r}")
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay and self.decays(name):
                update = update + (lr * weight_decay) * p.data
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


@dataclass
class TrainState:
    model: GaitNet
    optimizer: Adam
    iteration: int
    rng: np.random.Generator
    run_config: dict = field(default_factory=dict)

    def to_checkpoint(self) -> Checkpoint:
        arrays = {}
        for name, p in self.model.named_parameters():
            arrays[f"param/{name}"] = p.data
        for name, _ in self.model.named_parameters():
            arrays[f"adam_m/{name}"] = self.optimizer.m[name]
            arrays[f"adam_v/{name}"] = self.optimizer.v[name]
        meta = {
            "model_config": self.model.cfg.to_dict(),
            "rng_state": self.rng.bit_generator.state,
            "run_config": self.run_config,
        }
        return Checkpoint(self.model.cfg.preset, self.model.cfg.digest(), self.iteration, arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=np.float32) -> "TrainState":
        cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
        if cfg.digest() != ckpt.config_digest:
            raise CheckpointError("checkpoint config digest does not match its embedded model config")
        model = build_model(cfg).astype(dtype)
        for name, p in model.named_parameters():
            try:
                p.data = ckpt.arrays[f"param/{name}"].astype(dtype)
            except KeyError:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}") from None
        opt = _make_optimizer(model, ckpt.meta.get("run_config") or {})
        for name in opt.m:
            if f"adam_m/{name}" in ckpt.arrays:
                opt.m[name] = ckpt.arrays[f"adam_m/{name}"].astype(dtype)
                opt.v[name] = ckpt.arrays[f"adam_v/{name}"].astype(dtype)
        rng = np.random.default_rng()
        if ckpt.meta.get("rng_state"):
            rng.bit_generator.state = ckpt.meta["rng_state"]
        return cls(model, opt, ckpt.iteration, rng, ckpt.meta.get("run_config") or {})


def load_model(path, dtype=np.float32) -> GaitNet:
    return TrainState.from_checkpoint(Checkpoint.load(path), dtype).model


def _make_optimizer(model: GaitNet, run_cfg: dict) -> Adam:
    o = run_cfg.get("optim", {})
    return Adam(
        model.named_parameters(),
        o.get("beta1", 0.9),
        o.get("beta2", 0.999),
        o.get("eps", 1e-8),
        o.get("no_decay", ["*.p"]),
    )


def build_dataset(cfg: RunConfig) -> GaitDataset:
    if cfg.data.synth is not None:
        s = cfg.data.synth
        return synth_dataset(s.subjects, s.seqs, tuple(s.views), seed=s.seed, n_frames=s.frames)
    return load_dataset(cfg.data.root)


def training_split(cfg: RunConfig, dataset: GaitDataset) -> GaitDataset:
    return dataset.select(conditions=cfg.data.train_conditions, views=cfg.data.train_views)


def model_config_for(cfg: RunConfig, num_classes: int) -> ModelConfig:
    m = cfg.model
    return make_config(
        m.preset,
        n_parts=m.n_parts,
        global_branch=m.global_branch,
        local_branch=m.local_branch,
        mapping=m.mapping,
        ordering=m.ordering,
        num_classes=num_classes if m.cross_entropy else 0,
        gem_p0=m.gem_p0,
    )


def init_state(cfg: RunConfig, train_set: GaitDataset) -> TrainState:
    dtype = np.dtype(cfg.dtype)
    model = build_model(model_config_for(cfg, len(train_set.subjects)), seed=cfg.seed).astype(dtype)
    run = cfg.model_dump(mode="json")
    return TrainState(model, _make_optimizer(model, run), 0, np.random.default_rng(cfg.seed + 1), run)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class TrainResult:
    state: TrainState
    rows: list[str]
    checkpoints: list[Path]


def train(
    cfg: RunConfig,
    dataset: GaitDataset | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
    log_path=None,
    out_dir=None,
) -> TrainResult:
    """sample -> forward -> combined loss -> backward -> Adam, until ``stop_at`` (default: cfg.iterations).

    Loss rows are ``iteration,L_tri,L_cse,lr`` with values written via ``repr``
    so identical runs produce byte-identical logs.
    """
    dataset = build_dataset(cfg) if dataset is None else dataset
    train_set = training_split(cfg, dataset)
    state = init_state(cfg, train_set) if state is None else state
    model, dtype = state.model, state.model.parameters()[0].dtype
    schedule = Schedule.from_config(cfg)
    sampler = SamplerConfig(cfg.sampler.P, cfg.sampler.K, cfg.sampler.T)
    trip = TripletConfig(cfg.loss.margin)
    ce = CEConfig(model.cfg.num_classes, cfg.loss.smoothing) if model.cfg.num_classes else None
    stop = cfg.iterations if stop_at is None else stop_at
    out_dir = Path(out_dir if out_dir is not None else cfg.checkpoint_dir)

    rows, ckpts = [], []
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        log_fh = open(log_path, "a")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")
    t0 = time.perf_counter()
    try:
        while state.iteration < stop:
            it = state.iteration
            lr, wd = schedule.lr_at(it), schedule.weight_decay_at(it)
            batch = sample_batch(train_set, sampler, state.rng, dtype=dtype)
            model.zero_grad()
            strips = model(batch.clips)
            terms = loss_terms(strips, batch.labels, trip, ce, model.head)
            total = terms.total
            if not math.isfinite(total.item()):
                path = out_dir / f"forensic_{it:07d}.ckpt"
                out_dir.mkdir(parents=True, exist_ok=True)
                state.to_checkpoint().save(path)
                raise TrainingHalted(f"loss became non-finite at iteration {it}; state saved to {path}")
            total.backward()
            state.optimizer.step(it + 1, lr, wd)
            state.iteration = it + 1
            ce_val = None if terms.cross_entropy is None else terms.cross_entropy.item()
            row = f"{state.iteration},{_fmt(terms.triplet.item())},{_fmt(ce_val)},{_fmt(lr)}"
            rows.append(row)
            if log_fh:
                log_fh.write(row + "\n")
                log_fh.flush()
            if state.iteration % 10 == 0:
                log.info(
                    "iter %d  L_tri=%.4f  L_cse=%s  lr=%g  (%.2fs/it)",
                    state.iteration,
                    terms.triplet.item(),
                    "-" if ce_val is None else f"{ce_val:.4f}",
                    lr,
                    (time.perf_counter() - t0) / max(1, len(rows)),
                )
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == stop:
                out_dir.mkdir(parents=True, exist_ok=True)
                path = out_dir / f"ckpt_{state.iteration:07d}.ckpt"
                state.to_checkpoint().save(path)
                ckpts.append(path)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(state, rows, ckpts)
