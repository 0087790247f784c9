"""Shared exception types. The CLI maps these onto its exit codes."""


class ShapeError(ValueError):
    """Tensor arguments have incompatible or invalid dimensions."""


class ConfigError(ValueError):
    """A configuration value is structurally invalid."""


class DataError(RuntimeError):
    """Dataset or input data is missing or unusable."""


class ImageFormatError(DataError):
    """An image file is not an 8-bit RGB or grayscale PNG."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint serialization failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unparseable header."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version not supported by this build."""


class CheckpointTruncatedError(CheckpointError):
    """Blob section is shorter than the tensor directory promises."""


class OptimizerError(RuntimeError):
    """Non-finite gradients or invalid optimizer state."""


class ExpectationError(RuntimeError):
    """An --expect-* bound given to the CLI was violated."""
