"""Desk-scale dual-stream + cross-encoder vision-language pre-training."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig, desk_model_config, paper_model_config
from .model import VLModel

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "VLModel",
    "desk_model_config",
    "paper_model_config",
    "__version__",
]
