"""Ordinal degradation embeddings for image restoration at desk scale.

Modules: ``numerics`` (vector math), ``degrade`` (synthesis and manifests),
``features`` (handcrafted image cues), ``ordspace`` (bin grids), ``encoder``
(MLP and checkpoints), ``train`` (losses and optimizer), ``infer`` (prediction
and metrics), ``cfpg`` (projection guidance) and ``cli``.
"""

from .degrade import TYPES, DegradationRecipe, DegradationType, synthesize
from .encoder import Checkpoint
from .infer import RegressionConfig, evaluate, predict
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "TYPES",
    "Checkpoint",
    "DegradationRecipe",
    "DegradationType",
    "RegressionConfig",
    "TrainConfig",
    "evaluate",
    "predict",
    "synthesize",
    "train",
]
