"""Bayesian neural network process: amortised layerwise inference over BNN weights."""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    BNNPError,
    CholeskyError,
    ConfigError,
    DatasetFormatError,
    InputValidationError,
    TrainingAborted,
)
from .gaussian import GaussianFactor, Structure  # noqa: E402

__all__ = [
    "BNNPError",
    "CholeskyError",
    "ConfigError",
    "DatasetFormatError",
    "GaussianFactor",
    "InputValidationError",
    "Structure",
    "TrainingAborted",
]
__version__ = "0.1.0"
