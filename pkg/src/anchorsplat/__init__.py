"""Voxel-anchored Gaussian splatting with multimodal feature retrieval."""

from .config import Config, ConfigError
from .model import Model
from .trainer import evaluate, gradcheck, train

__all__ = ["Config", "ConfigError", "Model", "evaluate", "gradcheck", "train"]
__version__ = "0.1.0"
