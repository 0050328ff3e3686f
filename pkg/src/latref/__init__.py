"""Referring segmentation and grounding with multiple latent expressions."""

from .config import ModelConfig, load_config, save_config, seed_all
from .model import GroundingModel, build_model

__all__ = [
    "ModelConfig",
    "GroundingModel",
    "build_model",
    "load_config",
    "save_config",
    "seed_all",
]
