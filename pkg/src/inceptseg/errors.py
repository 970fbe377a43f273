"""Exception hierarchy shared by every module."""


class InceptSegError(Exception):
    """Base class for all package errors."""


class ShapeError(InceptSegError, ValueError):
    pass


class ConfigError(InceptSegError, ValueError):
    pass


class ValidationError(InceptSegError, ValueError):
    """Input data violates a documented contract (e.g. a non-binary mask)."""


class UsageError(InceptSegError, RuntimeError):
    """An API was called out of order, e.g. backward before a train-mode forward."""


class NumericalError(InceptSegError, ArithmeticError):
    pass


class DecodeError(InceptSegError, ValueError):
    pass


class UnsupportedFormatError(DecodeError):
    pass


class TruncatedFileError(DecodeError):
    pass


class BitDepthError(DecodeError):
    pass


class CheckpointError(InceptSegError, ValueError):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
