"""Exception types shared across the package."""


class AgglomerateError(Exception):
    """Base class for all package errors."""


class DimensionError(AgglomerateError, ValueError):
    """Shapes or extents do not satisfy an operation's requirements."""


class ContractError(AgglomerateError, ValueError):
    """A caller violated an API precondition."""


class NumericError(AgglomerateError, ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class InsufficientDataError(AgglomerateError, ValueError):
    """Not enough samples to fit the requested statistics."""


class FormatError(AgglomerateError, ValueError):
    """A binary or text artifact does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(AgglomerateError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key
