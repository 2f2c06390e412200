"""Exception types shared across the package."""


class VxsError(Exception):
    """Base class for all errors raised by this package."""


class MalformedInputError(VxsError, ValueError):
    """Input bytes/files do not match their declared layout."""


class DimensionError(VxsError, ValueError):
    """Array dimensions violate an operation's requirements."""


class DegenerateRangeError(VxsError, ValueError):
    """A value range collapsed to a point where a spread is required."""


class ShapeError(VxsError, ValueError):
    """Operand shapes are inconsistent inside a computation graph."""


class NumericError(VxsError, ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""


class ArgumentError(VxsError, ValueError):
    """A scalar argument is outside its legal domain."""


class StateError(VxsError, RuntimeError):
    """An object is not in the state an operation requires."""


class ConfigError(VxsError, ValueError):
    """Two configuration objects are mutually inconsistent."""


class ChecksumError(VxsError, ValueError):
    """Container payload failed its integrity check."""
