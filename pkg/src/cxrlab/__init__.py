"""Four-class chest X-ray classification: supervised, multi-task and
self-supervised training recipes with evaluation and interpretability tools."""

from .dataset import ClassLabel, BoundingBox, ImageRecord, generate_phantom_dataset, load_manifest
from .config import ExperimentConfig, load_config, config_hash

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ClassLabel",
    "ExperimentConfig",
    "ImageRecord",
    "config_hash",
    "generate_phantom_dataset",
    "load_config",
    "load_manifest",
]
