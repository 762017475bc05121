"""Contrastive pretraining with shape-silhouette prototypes and intrinsic-image views.

Subpackages by concern:

- ``intrinsics``: Retinex reflectance/shading decomposition
- ``shapes``: synthetic shape x texture data, cue-conflict stimuli, corruptions
- ``encoder``: query/momentum encoders
- ``prototypes``: spherical k-means banks with per-cluster concentrations
- ``losses``: InfoNCE, prototype NCE and their combinations, with analytic gradients
- ``trainer``: pretraining loop, checkpoints, feature extraction
- ``evaluation``: linear probes, AMI, shape bias, corruption robustness, SmoothGrad
"""
from .config import TrainConfig
from .encoder import EncoderConfig
from .errors import (CheckpointError, DatasetError, InvalidInputError, MidVCLError, MissingMaskError,
                     SolverError, TrainingError)
from .losses import LossConfig
from .prototypes import ClusteringSpec

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ClusteringSpec", "DatasetError", "EncoderConfig", "InvalidInputError",
    "LossConfig", "MidVCLError", "MissingMaskError", "SolverError", "TrainConfig", "TrainingError",
]
