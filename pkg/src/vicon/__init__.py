"""In-context operator learning for time-dependent PDEs, in plain numpy.

The package trains a small transformer that reads a handful of
``(condition, quantity-of-interest)`` frame pairs from one trajectory and
predicts the next frame for a new condition, then rolls it out.
"""

from .model import DESK, FULL_SCALE, ModelConfig, ViconModel
from .train import TrainConfig

__all__ = ["DESK", "FULL_SCALE", "ModelConfig", "TrainConfig", "ViconModel"]
__version__ = "0.1.0"
