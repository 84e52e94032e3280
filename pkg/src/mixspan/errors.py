"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad hyper-parameter, missing required path, etc."""


class DataError(ValueError):
    """Malformed input data: bad JSONL line, invariant violation, bad file format."""


class NumericError(RuntimeError):
    """Numerical failure during training (non-finite loss or gradient)."""
