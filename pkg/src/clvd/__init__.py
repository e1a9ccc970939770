"""Curriculum-regularised video describer at desk scale, on a numpy autodiff core."""

from .tensor import CHECKPOINT_VERSION

__version__ = "0.1.0"

__all__ = ["__version__", "CHECKPOINT_VERSION"]
