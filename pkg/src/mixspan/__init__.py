"""Semi-supervised sequence tagging and span classification with
augmentation operators, encoding-level interpolation, and label guessing."""

from .errors import ConfigError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
