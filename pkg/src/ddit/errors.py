"""Exception types shared across the package."""


class DditError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DditError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(DditError):
    """Array/tensor shape incompatible with the requested operation."""


class InputError(DditError):
    """Invalid runtime input: out-of-range ids, mismatched pairs, bad labels."""


class PersistenceError(DditError):
    """Filesystem read/write failure; message names the offending path."""


class StateError(DditError):
    """Inconsistent mutable state, e.g. checkpoint/optimizer name mismatch."""


class NumericError(DditError):
    """Non-finite values where finite arithmetic is required."""


class UsageError(DditError):
    """A request that contradicts how the component must be used."""
