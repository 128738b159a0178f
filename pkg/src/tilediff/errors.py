class TileDiffError(Exception):
    """Base class for package errors."""

    category = "internal"


class ConfigurationError(TileDiffError):
    """Invalid configuration value, file, or geometry."""

    category = "config"


class ContractViolation(TileDiffError):
    """Caller broke an operation precondition."""

    category = "contract"


class NumericError(TileDiffError):
    """Numerical failure (underflow, non-finite values, non-PSD input)."""

    category = "numeric"
