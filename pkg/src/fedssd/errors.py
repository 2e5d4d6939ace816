"""Exception types shared across the package."""


class FedSSDError(Exception):
    """Base class for package errors."""


class ShapeError(FedSSDError, ValueError):
    """Arrays or parameter sets with incompatible shapes."""


class IdxFormatError(FedSSDError, ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PartitionError(FedSSDError, ValueError):
    pass


class ConfigError(FedSSDError, ValueError):
    """Invalid experiment configuration; the message names the key."""
