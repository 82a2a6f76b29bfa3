"""Exception types shared across the package."""


class HistobenchError(Exception):
    """Base class for all package errors."""


class ShapeError(HistobenchError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ParameterError(HistobenchError, ValueError):
    """A hyperparameter or argument is outside its legal range."""


class StateError(HistobenchError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(HistobenchError, ValueError):
    """A file does not match its expected on-disk format."""


class DataLoadError(HistobenchError, ValueError):
    """A dataset source is missing files or otherwise unreadable."""


class MetricUndefinedError(HistobenchError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class TrainingDivergedError(HistobenchError, RuntimeError):
    """Training produced a non-finite loss."""
