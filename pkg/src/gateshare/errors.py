"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class GateShareError(Exception):
    """Base class for all package errors."""


class ConfigError(GateShareError):
    """Invalid configuration: bad keys, infeasible budgets, shape mismatches."""


class ShapeError(ConfigError):
    """Operand shapes do not conform to an op's shape rule."""


class DataError(GateShareError):
    """Dataset files missing, truncated, or malformed."""


class NumericError(GateShareError):
    """Non-finite values encountered where finite ones are required."""
