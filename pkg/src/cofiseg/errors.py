"""Exception types shared across the package."""


class CofisegError(Exception):
    """Base class for all package errors."""


class DimensionError(CofisegError, ValueError):
    """Array shapes or extents are incompatible with an operation."""


class ConfigError(CofisegError, ValueError):
    """A configuration (run config, synth spec, network hyperparameters) is invalid."""


class FormatError(CofisegError, ValueError):
    """A serialized file (volume, checkpoint, report) is malformed."""


class NumericError(CofisegError, ArithmeticError):
    """Non-finite values or a failed numeric contract."""


class DataError(CofisegError, ValueError):
    """Dataset-level problems: missing cases, unpaired files, bad geometry."""
