"""Exception hierarchy.

Every error raised by this package derives from MoeForgeError, so callers
can catch one type at the CLI boundary. Subclasses also inherit from the
matching builtin (ValueError, LookupError, ...) to stay idiomatic.
"""


class MoeForgeError(Exception):
    """Base class for all package errors."""


class DimensionError(MoeForgeError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(MoeForgeError, ValueError):
    """An argument is out of its allowed range or malformed."""


class NumericError(MoeForgeError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(MoeForgeError, ValueError):
    """A configuration is inconsistent or infeasible."""


class DataError(MoeForgeError, ValueError):
    """Training/eval data violates a precondition (e.g. label outside the task)."""


class StateError(MoeForgeError, RuntimeError):
    """An object is used before it reached the required state."""


class PolicyError(MoeForgeError, RuntimeError):
    """A merge/freeze policy precondition was violated."""


class RouterLookupError(MoeForgeError, LookupError):
    """No router exists for the requested task id."""


class CheckpointError(MoeForgeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint payload is shorter than its manifest promises."""


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match the payload."""
