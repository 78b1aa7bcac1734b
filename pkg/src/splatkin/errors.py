"""Exception types shared across the package."""


class SplatkinError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SplatkinError, ValueError):
    """An argument violates a documented precondition."""


class CapacityError(SplatkinError, ValueError):
    """A container is too small for the requested payload."""


class DegenerateBlendError(SplatkinError, ArithmeticError):
    """Quaternion blend collapsed to (near) zero norm."""


class FormatError(SplatkinError, ValueError):
    """A file does not conform to its format; message carries position context."""


class TruncationError(FormatError):
    """A binary payload ended early; message names expected vs actual byte counts."""
