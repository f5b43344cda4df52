"""Exception hierarchy. Every error kind the package raises derives from ``CoSwinError``."""


class CoSwinError(Exception):
    """Base class."""


class ShapeError(CoSwinError, ValueError):
    """Operand shapes violate an op's contract."""


class DomainError(CoSwinError, ValueError):
    """Input outside an op's mathematical domain (log of non-positive, empty reduction...)."""


class ContractError(CoSwinError, RuntimeError):
    """API misuse, e.g. ``backward`` on a non-scalar."""


class ConfigError(CoSwinError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(CoSwinError, ValueError):
    """Base for checkpoint format failures."""


class MagicError(CheckpointError):
    """Bad magic bytes or unsupported version."""


class TruncatedError(CheckpointError):
    """File ends before the declared content."""


class ChecksumError(CheckpointError):
    """Trailing CRC-64 does not match the content."""


class TensorMismatchError(CheckpointError):
    """Strict load found a missing, unknown, or mis-shaped tensor."""

    def __init__(self, message: str, name: str):
        super().__init__(message)
        self.name = name


class ImageIOError(CoSwinError, OSError):
    """Unreadable image file."""


class ImageSizeError(CoSwinError, ValueError):
    """Image and mask sizes disagree."""


class MaskValueError(CoSwinError, ValueError):
    """Mask is not binary within tolerance."""


class TrainingDiverged(CoSwinError, RuntimeError):
    """Loss became non-finite; the last good checkpoint is left on disk."""
