"""Exception types shared across the package."""


class PseudorecError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(PseudorecError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(PseudorecError, ValueError):
    """An input lies outside the mathematical domain of the operation."""


class NotScalar(PseudorecError, ValueError):
    """backward() was started from a node that does not evaluate to a scalar."""


class BatchTooSmall(PseudorecError, ValueError):
    """The operation needs a larger batch (batch statistics / pairwise terms)."""


class BadMagic(PseudorecError, ValueError):
    """A binary file's magic number does not identify a supported format."""


class TruncatedFile(PseudorecError, ValueError):
    """A binary file ended before its declared payload."""


class LabelOutOfRange(PseudorecError, ValueError):
    """A label value exceeds the declared class count."""


class ManifestInvalid(PseudorecError, ValueError):
    """A raw-task manifest is missing fields or references missing files."""


class SizeMismatch(PseudorecError, ValueError):
    """Declared sizes disagree with the actual data."""


class CheckpointInvalid(PseudorecError, ValueError):
    """A checkpoint does not contain the tensors required by its consumer."""


class OddBatch(PseudorecError, ValueError):
    """Half-and-half minibatch mixing needs an even batch size."""


class BadHeader(PseudorecError, ValueError):
    """A checkpoint file does not start with the expected magic/header."""


class VersionUnsupported(PseudorecError, ValueError):
    """A checkpoint file carries a format version this build cannot read."""


class ChecksumMismatch(PseudorecError, ValueError):
    """A checkpoint file's checksum does not match its contents."""


class IoError(PseudorecError, OSError):
    """An artifact could not be written or read back."""
