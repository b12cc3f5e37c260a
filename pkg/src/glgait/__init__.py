"""Gait recognition from silhouette sequences with global-local convolutions.

A self-contained numpy implementation: reverse-mode tensors, 3D convolution,
GLConv/LTA/GeM layers, batch-all triplet + cross-entropy training, and
cross-view Rank-1 evaluation.
"""
from .config import RunConfig, load_run_config, run_preset, toy_config
from .data import GaitDataset, SamplerConfig, SilhouetteSequence, load_dataset, sample_batch, synth_dataset
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DataError,
    GaitError,
    InputTooSmallError,
    ParameterDomainError,
    SamplingError,
    TrainingHalted,
)
from .evaluation import EmbeddingMatrix, extract_embeddings, get_protocol, rank1, report
from .model import GaitNet, ModelConfig, build_model, make_config
from .tensor import Tensor, no_grad
from .training import Adam, Schedule, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CheckpointError",
    "ConfigurationError",
    "ContractError",
    "DataError",
    "EmbeddingMatrix",
    "GaitDataset",
    "GaitError",
    "GaitNet",
    "InputTooSmallError",
    "ModelConfig",
    "ParameterDomainError",
    "RunConfig",
    "SamplerConfig",
    "SamplingError",
    "Schedule",
    "SilhouetteSequence",
    "Tensor",
    "TrainState",
    "TrainingHalted",
    "build_model",
    "extract_embeddings",
    "get_protocol",
    "load_dataset",
    "load_run_config",
    "make_config",
    "no_grad",
    "rank1",
    "report",
    "run_preset",
    "sample_batch",
    "synth_dataset",
    "toy_config",
    "train",
]
