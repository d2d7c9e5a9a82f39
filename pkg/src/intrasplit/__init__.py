"""One-class classification by intra-class splitting."""

from .config import ExperimentConfig, make_config
from .data import Dataset, ProtocolSplit, make_protocol, make_synthetic
from .metrics import auc, mse, ssim
from .model import OneClassModel, Trainer, train, train_ablation
from .splitting import SplitResult, split, train_split_autoencoder

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "OneClassModel",
    "ProtocolSplit",
    "SplitResult",
    "Trainer",
    "auc",
    "make_config",
    "make_protocol",
    "make_synthetic",
    "mse",
    "split",
    "ssim",
    "train",
    "train_ablation",
    "train_split_autoencoder",
]
