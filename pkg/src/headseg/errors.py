"""Exception hierarchy shared by all headseg modules."""


class HeadsegError(Exception):
    """Base class for all errors raised by this package."""


class NiftiParseError(HeadsegError):
    """Malformed NIfTI header or magic bytes."""


class UnsupportedDatatypeError(HeadsegError):
    """NIfTI datatype code outside the supported set."""


class LengthMismatchError(HeadsegError):
    """Data section shorter or longer than the header promises."""


class RangeError(HeadsegError):
    """Value outside the representable range of the requested datatype."""


class GeometryError(HeadsegError):
    """Degenerate or inconsistent voxel-to-world geometry."""


class DegenerateImageError(HeadsegError):
    """Image content unusable for intensity normalization."""


class RecordError(HeadsegError):
    """Conform record inconsistent with the volume it should restore."""


class ShapeError(HeadsegError):
    """Array shapes incompatible with the requested operation."""


class ConfigError(HeadsegError):
    """Invalid model or run configuration."""


class ContractError(HeadsegError):
    """Input violates a pipeline stage precondition."""


class CompatibilityError(HeadsegError):
    """Weight container does not match the expected architecture."""


class FormatError(HeadsegError):
    """Corrupt or unrecognized weight container."""


class OptimizerError(HeadsegError):
    """Non-finite gradients reached the optimizer."""


class TrainingError(HeadsegError):
    """Training diverged or received unusable data."""


class PairingError(HeadsegError):
    """Image and label volumes disagree on geometry."""


class DomainError(HeadsegError):
    """Mathematically undefined request (empty input, bad fraction, ...)."""


class StageError(HeadsegError):
    """Wraps an error from a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
