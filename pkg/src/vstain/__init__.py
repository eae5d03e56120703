"""Virtual staining of microscopy images with global pixel transformer layers."""

from .errors import (ConfigError, DataError, NumericError, ShapeError,
                     VstainError)
from .network import (NetworkConfig, build, forward, load_checkpoint,
                      save_checkpoint, stage_ledger)
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericError", "ShapeError", "VstainError",
    "NetworkConfig", "TrainConfig", "build", "forward", "load_checkpoint",
    "save_checkpoint", "stage_ledger", "train",
]
