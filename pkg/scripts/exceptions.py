class LabError(Exception):
    """Base class for every error raised by the purification lab."""


class DimensionError(LabError, ValueError):
    """A tensor shape does not fit the operation; the message names the axis."""


class DatasetFormatError(LabError, ValueError):
    """An on-disk dataset file is malformed."""


class CheckpointError(LabError):
    """A checkpoint file cannot be decoded into the requested model."""


class ConfigurationError(LabError, ValueError):
    """Invalid spec values, unknown config keys or missing referenced files."""


class DivergenceError(LabError, RuntimeError):
    """Training produced a non-finite loss."""


class DegenerateStatsError(LabError, ValueError):
    """Reconstruction statistics collapsed to zero spread."""


class LabelError(LabError, ValueError):
    """A class label lies outside [0, num_classes)."""
