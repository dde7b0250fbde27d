"""Probing residual networks for iterative refinement.

A small numpy deep-learning stack (tape autodiff, residual networks, SGD)
plus per-block probes: cosine loss, l2 ratio, block dropping, intermediate
classification, borderline analysis, weight sharing and unrolling.
"""
from .autodiff import Tape, Tensor
from .nn import ArchitectureConfig, Model, build_model, single_repr_config
from .share_unroll import SharingSpec, UnrollSpec, build_shared_model, unroll_last_block
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "Model",
    "SharingSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "UnrollSpec",
    "build_model",
    "build_shared_model",
    "single_repr_config",
    "unroll_last_block",
]
