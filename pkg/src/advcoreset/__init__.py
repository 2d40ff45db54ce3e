"""Robust training of small classifiers with adaptive adversarial
coreset selection: periodically pick a weighted subset whose gradients
(at attacked points) approximate the full gradient, then run weighted
adversarial training on that subset only."""

from .attacks import AttackSpec
from .coreset import Coreset, SelectionConfig
from .data import DatasetHandle
from .models import ModelSpec, ModelState
from .objectives import Objective
from .training import TrainConfig, train

__all__ = [
    "AttackSpec", "Coreset", "SelectionConfig", "DatasetHandle",
    "ModelSpec", "ModelState", "Objective", "TrainConfig", "train",
]
__version__ = "0.1.0"
