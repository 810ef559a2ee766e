"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see ``tflocoformer.cli``).
"""


class LocoformerError(Exception):
    """Base class for all package errors."""


class ConfigError(LocoformerError, ValueError):
    """Invalid or inconsistent configuration."""


class DimensionError(LocoformerError, ValueError):
    """Array shapes do not line up."""


class FormatError(LocoformerError, ValueError):
    """Malformed file (WAV, manifest, checkpoint)."""


class NumericError(LocoformerError, ArithmeticError):
    """NaN/inf encountered where a finite value is required."""


class UsageError(LocoformerError, RuntimeError):
    """API misuse, e.g. backward on a non-scalar."""


class UnsupportedError(ConfigError):
    """Configuration outside the supported envelope (e.g. PIT with N > 4)."""


class RejectedItem(LocoformerError):
    """A data item was rejected (degenerate silence); the caller should resample."""
