"""Exception types shared across the toolkit.

The CLI maps these onto its exit-code contract, so raising the right
class matters more than the message text.
"""


class GacanError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(GacanError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(GacanError):
    """An operation was called in a way its contract forbids."""


class ValidationError(GacanError):
    """Input data or configuration values violate a documented invariant."""


class ConfigError(ValidationError):
    """A run-config file or CLI argument is malformed or inconsistent."""


class DataError(ValidationError):
    """A data file is missing, malformed, or insufficient for the request."""


class NumericError(GacanError):
    """A numeric operation produced non-finite values or failed outright."""


class ConvergenceError(NumericError):
    """An iterative solver ran out of iterations.

    Carries the last estimate so callers can inspect how close it got.
    """

    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class TrainingDivergenceError(NumericError):
    """Training produced a non-finite loss; carries the last good parameters."""

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history if history is not None else []
