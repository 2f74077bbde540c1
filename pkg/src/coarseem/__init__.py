"""Variational EM for part segmentation from few dense labels and many coarse ones."""

from .config import RunConfig, load_config
from .estimators import PartSegmenter
from .models import ModelBundle
from .synthgen import GenConfig, generate_benchmark
from .training import BaselineConfig, EMConfig, init_bundle, train_em

__all__ = [
    "BaselineConfig",
    "EMConfig",
    "GenConfig",
    "ModelBundle",
    "PartSegmenter",
    "RunConfig",
    "generate_benchmark",
    "init_bundle",
    "load_config",
    "train_em",
]
__version__ = "0.1.0"
