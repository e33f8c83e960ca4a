"""Exception types shared across the package.

Every error raised by the public API derives from AeiError so callers
(and the CLI) can map failures to exit codes in one place.
"""


class AeiError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigError(AeiError):
    """Invalid configuration: bad ranges, malformed config file, unknown key."""

    category = "config"


class DataError(AeiError):
    """Data outside its declared domain (e.g. spec value outside its range)."""

    category = "data"


class ShapeError(AeiError):
    """Tensor or network shape mismatch."""

    category = "shape"


class NumericError(AeiError):
    """Non-finite values, singular systems, diverged updates."""

    category = "numeric"


class UsageError(AeiError):
    """API or CLI misuse (bad argument combination)."""

    category = "usage"


class FormatError(AeiError):
    """Malformed serialized artifact (checkpoint, config snapshot)."""

    category = "format"
