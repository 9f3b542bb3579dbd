"""Exception types raised across the package."""


class MeepoError(Exception):
    """Base class for all package errors."""


class DimensionError(MeepoError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(MeepoError, ValueError):
    """An argument or configuration value is outside its allowed range."""


class DataError(MeepoError, ValueError):
    """Input data violates a documented invariant (labels, empty clouds, ...)."""


class DomainError(MeepoError, ValueError):
    """A numeric argument lies outside the domain of a formula."""


class NumericError(MeepoError, ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(MeepoError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MeepoError, ValueError):
    """Model or training configuration is inconsistent."""
