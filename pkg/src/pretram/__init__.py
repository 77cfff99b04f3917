"""Trajectory-map contrastive pre-training on synthetic semantic maps, built on a small numpy autodiff core."""
from __future__ import annotations

from .errors import CheckpointMismatchError, ConfigError, DatasetFormatError, NumericalError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "CheckpointMismatchError",
    "ConfigError",
    "DatasetFormatError",
    "NumericalError",
    "ShapeError",
    "__version__",
]
