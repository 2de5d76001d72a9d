"""Failure categories shared across the library and the CLI.

The CLI maps these onto process exit codes: configuration problems exit
with 2, dataset problems with 3, numeric failures with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: schema violations, bad hyperparameters."""


class DataError(ValueError):
    """Invalid or unusable dataset contents or files."""


class NumericError(RuntimeError):
    """Numeric failure during training or evaluation (NaN loss etc.)."""
