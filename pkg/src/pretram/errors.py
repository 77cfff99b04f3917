"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with an operation."""


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed; the message names the file and offset."""


class CheckpointMismatchError(ValueError):
    """Checkpoint tensors do not line up with the model being loaded."""

    def __init__(self, message: str, missing=(), unexpected=(), mismatched=()):
        super().__init__(message)
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)


class ConfigError(ValueError):
    """Invalid run configuration."""
