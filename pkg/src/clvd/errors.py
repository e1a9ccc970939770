"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is outside its domain."""


class InputError(ValueError):
    """Input data (files, batches, corpora) is malformed or empty."""


class ShapeError(ValueError):
    """Tensor shapes do not conform for an operation."""


class BackwardError(RuntimeError):
    """Reverse pass requested on a non-scalar loss or an already consumed tape."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite during training."""
