"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so errors raised anywhere in
the library should go through one of these classes.
"""


class FarnetError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(FarnetError, ValueError):
    """An argument value is out of its documented domain."""


class FrameError(FarnetError, ValueError):
    """Landmark coordinates are tagged with the wrong coordinate frame."""


class ShapeError(FarnetError, ValueError):
    """Tensor or grid shapes are inconsistent."""


class ConfigError(FarnetError, ValueError):
    """A configuration object or file is invalid or internally inconsistent."""


class ComparisonError(FarnetError, ValueError):
    """Prediction and ground truth cannot be compared (count/frame mismatch)."""


class DataError(FarnetError):
    """Dataset ingestion failed (missing file, malformed annotation, ...)."""


class GenerationError(FarnetError):
    """Synthetic data could not be generated under the given constraints."""


class ResourceError(FarnetError):
    """A required external resource (e.g. a pretrained-weights archive) is missing."""


class NumericsError(FarnetError):
    """Training hit a non-finite loss or another numeric failure."""


class CheckpointError(FarnetError):
    """A checkpoint could not be written or restored."""
