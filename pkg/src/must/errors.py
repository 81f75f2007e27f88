"""Error types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Everything else is a plain bug and surfaces as a
traceback.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Missing, malformed, or mismatched input data or artifacts."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (NaN/Inf)."""
