"""Referring expression grounding with a variational context model."""

from .scene import BBox, FeatureConfig, Region, Scene, ValidationError, load_scenes, save_scenes
from .scoring import VARIANTS, ModelConfig, forward
from .train import Checkpoint, TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Checkpoint",
    "FeatureConfig",
    "ModelConfig",
    "Region",
    "Scene",
    "TrainConfig",
    "VARIANTS",
    "ValidationError",
    "forward",
    "load_scenes",
    "save_scenes",
    "train_loop",
]
