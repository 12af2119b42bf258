"""Exception types shared across the package."""


class BNNPError(Exception):
    """Base class for all package errors."""


class CholeskyError(BNNPError, ValueError):
    """A matrix stayed non positive-definite after the full jitter ladder."""

    def __init__(self, label: str, max_jitter: float):
        self.label = label
        self.max_jitter = max_jitter
        super().__init__(
            f"Cholesky factorisation of {label} failed even with jitter {max_jitter:.3g}"
        )


class InputValidationError(BNNPError, ValueError):
    """Non-finite or badly shaped inputs."""


class DatasetFormatError(BNNPError, ValueError):
    """A meta-dataset file could not be parsed."""


class ConfigError(BNNPError, ValueError):
    """Invalid or unknown configuration entries."""


class TrainingAborted(BNNPError, RuntimeError):
    """Too many consecutive non-finite gradient steps."""
