"""Exception types raised across the package."""


class PenLettersError(Exception):
    """Base class for all package errors."""


class ShapeError(PenLettersError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(PenLettersError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ManifestError(PenLettersError, ValueError):
    """A manifest, sample or calibration file could not be parsed."""


class CheckpointError(PenLettersError):
    """A checkpoint file is truncated or malformed."""


class ChecksumError(CheckpointError):
    """The checkpoint payload does not match its stored checksum."""


class SpecMismatchError(CheckpointError):
    """The checkpoint was written for a different model specification."""
