"""Exception hierarchy shared by every module."""


class HetrepError(Exception):
    """Base class for all package errors."""


class ValidationError(HetrepError, ValueError):
    """Input violates a documented precondition."""


class SchemaError(ValidationError):
    """Unregistered node/edge/feature type code or inconsistent schema."""


class NotFoundError(HetrepError, KeyError):
    """A referenced node or key does not exist."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class IntegrityError(HetrepError):
    """On-disk data failed a checksum or structural check."""


class StateError(HetrepError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class NumericError(HetrepError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class ProtocolError(HetrepError):
    """Malformed or unexpected wire data."""

    def __init__(self, message: str, code: int = 1, retryable: bool = False):
        super().__init__(message)
        self.code = code
        self.retryable = retryable
