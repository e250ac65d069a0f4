"""Exception types shared across the library."""


class DirlError(Exception):
    """Base class for all library errors."""


class DimensionError(DirlError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(DirlError):
    """Invalid configuration value, key, or geometry."""


class DataError(DirlError):
    """Malformed input data (centroid files, bins, labels, ...)."""


class DegenerateRowError(DirlError):
    """A softmax row had no finite entry after mask addition."""


class CheckpointError(DirlError):
    """Checkpoint or feature archive is missing, corrupt, or incompatible."""


class MetricError(DirlError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class NoSignalError(DirlError):
    """Every loss term was skipped for a sample; it carries no signal."""


class AbsentRegionError(DirlError):
    """A region-specific quantity was requested for an empty region."""


class NotFittedError(DirlError):
    """Estimator method called before fit()."""
