"""Exception hierarchy. The CLI maps these onto process exit codes."""


class InvometricError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(InvometricError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(InvometricError, ValueError):
    """Invalid hyperparameters or run configuration."""


class DataFormatError(InvometricError, ValueError):
    """A data or weight file is malformed."""


class TruncationError(DataFormatError):
    """A file ends before its declared payload does."""


class PairingError(DataFormatError):
    """Image and label files disagree on the number of items."""


class WeightFileError(DataFormatError):
    """A serialized model file cannot be decoded."""


class UnsupportedError(InvometricError):
    """The requested operation does not apply to this model."""


class VerificationError(InvometricError):
    """A numerical verification check failed."""
