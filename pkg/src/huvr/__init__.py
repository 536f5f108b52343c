"""Patch-wise INR hyper-network with compressed token embeddings."""

from .autodiff import Tape, Tensor, grad_check, param, tensor
from .hypernet import HuvrConfig, HuvrModel, TokenSet, VARIANTS
from .inr import BaseInr, CoordGrid, InrConfig
from .losses import DistillationConfig, LossConfig
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "grad_check", "param", "tensor",
    "HuvrConfig", "HuvrModel", "TokenSet", "VARIANTS",
    "BaseInr", "CoordGrid", "InrConfig",
    "DistillationConfig", "LossConfig",
    "TrainConfig", "train",
]
