"""Run configuration files (JSON) with strict validation.

Unknown keys are errors everywhere, so a misspelled ablation switch cannot be
silently ignored.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthSpec(_Strict):
    subjects: int = Field(8, ge=2)
    seqs: int = Field(4, ge=1)
    views: list[int] = [0, 90]
    frames: int = Field(40, ge=1)
    seed: int = 0


class DataSpec(_Strict):
    root: Optional[str] = None
    synth: Optional[SynthSpec] = None
    train_conditions: Optional[list[str]] = None
    train_views: Optional[list[int]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.root is None) == (self.synth is None):
            raise ValueError("exactly one of 'root' or 'synth' must be given")
        return self


class ModelSpec(_Strict):
    preset: Literal["casia-b", "casia-b-tiny", "oumvlp"] = "casia-b-tiny"
    n_parts: int = Field(8, ge=1)
    global_branch: bool = True
    local_branch: bool = True
    mapping: Literal["gem", "max", "avg", "max+avg"] = "gem"
    ordering: Literal["LTA+SP", "SP+SP", "SP+LTA", "LTA+LTA"] = "LTA+SP"
    gem_p0: float = Field(6.5, gt=0)
    cross_entropy: bool = True


class LossSpec(_Strict):
    margin: float = Field(0.2, gt=0)
    smoothing: float = Field(0.0, ge=0, lt=1)


class SamplerSpec(_Strict):
    P: int = Field(8, ge=2)
    K: int = Field(8, ge=2)
    T: int = Field(30, ge=1)


Milestones = list[tuple[int, float]]


class OptimSpec(_Strict):
    lr: Milestones = [(0, 1e-4)]
    weight_decay: Milestones = [(0, 5e-4)]
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    no_decay: list[str] = ["*.p"]

    @field_validator("lr", "weight_decay")
    @classmethod
    def _increasing(cls, v):
        if not v or v[0][0] != 0:
            raise ValueError("milestones must start at iteration 0")
        its = [i for i, _ in v]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("milestone iterations must be strictly increasing")
        if any(val < 0 for _, val in v):
            raise ValueError("milestone values must be >= 0")
        return v


class EvalSpec(_Strict):
    protocol: Literal["casia-b", "oumvlp", "synthetic"] = "synthetic"
    pad_to: int = Field(30, ge=1)


class RunConfig(_Strict):
    name: str = "run"
    seed: int = 0
    iterations: int = Field(500, ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = Field(100, ge=1)
    data: DataSpec
    model: ModelSpec = ModelSpec()
    loss: LossSpec = LossSpec()
    sampler: SamplerSpec = SamplerSpec()
    optim: OptimSpec = OptimSpec()
    eval: EvalSpec = EvalSpec()


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def parse_run_config(obj: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigurationError("invalid run config:\n" + format_validation_error(exc)) from None


def load_run_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return parse_run_config(obj)


def toy_config(**overrides) -> RunConfig:
    """The desk-scale overfit run: casia-b-tiny on 8 synthetic subjects, P=K=4."""
    base = {
        "name": "toy",
        "seed": 0,
        "iterations": 500,
        "checkpoint_every": 250,
        "data": {
            "synth": {"subjects": 8, "seqs": 4, "views": [0, 90], "frames": 40, "seed": 7},
            "train_conditions": ["nm-01", "nm-02"],
        },
        "model": {"preset": "casia-b-tiny"},
        "sampler": {"P": 4, "K": 4, "T": 30},
        "optim": {"lr": [[0, 1e-3]], "weight_decay": [[0, 0.0]]},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **val}
        else:
            base[key] = val
    return parse_run_config(base)


def _benchmark(name, preset, sampler, lr, wd, iterations, smoothing, data_root, protocol):
    return {
        "name": name,
        "iterations": iterations,
        "checkpoint_every": 10_000,
        "data": {"root": data_root},
        "model": {"preset": preset},
        "loss": {"margin": 0.2, "smoothing": smoothing},
        "sampler": sampler,
        "optim": {"lr": lr, "weight_decay": wd},
        "eval": {"protocol": protocol},
    }


RUN_PRESETS = ("casia-b-st", "casia-b-mt", "casia-b-lt", "oumvlp", "casia-b-tiny")


def run_preset(name: str, data_root: str | None = None) -> RunConfig:
    """Embedded run configurations; ``casia-b-tiny`` is the synthetic toy run."""
    casia = {"P": 8, "K": 8, "T": 30}
    root = data_root or "."
    table = {
        "casia-b-st": lambda: _benchmark(name, "casia-b", casia, [[0, 1e-4]], [[0, 5e-4]], 60_000, 0.0, root, "casia-b"),
        "casia-b-mt": lambda: _benchmark(
            name, "casia-b", casia, [[0, 1e-4], [70_000, 1e-5]], [[0, 5e-4]], 80_000, 0.0, root, "casia-b"
        ),
        "casia-b-lt": lambda: _benchmark(
            name, "casia-b", casia, [[0, 1e-4], [70_000, 1e-5]], [[0, 5e-4]], 80_000, 0.0, root, "casia-b"
        ),
        "oumvlp": lambda: _benchmark(
            name,
            "oumvlp",
            {"P": 32, "K": 8, "T": 30},
            [[0, 1e-4], [150_000, 1e-5], [200_000, 5e-6]],
            [[0, 0.0], [200_000, 5e-4]],
            210_000,
            0.1,
            root,
            "oumvlp",
        ),
    }
    if name == "casia-b-tiny":
        return toy_config()
    if name not in table:
        raise ConfigurationError(f"unknown run preset {name!r}; choose from {RUN_PRESETS}")
    return parse_run_config(table[name]())
