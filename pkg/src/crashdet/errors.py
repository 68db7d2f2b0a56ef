"""Exception hierarchy shared by all pipeline stages."""


class CrashDetError(Exception):
    """Base class for errors raised by this package."""


class FrameSourceError(CrashDetError):
    """Missing, malformed or non-contiguous frame input."""


class DetectionFormatError(CrashDetError):
    """A detection feed line could not be parsed or validated."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrackingError(CrashDetError):
    """Invalid tracker input (degenerate box, index regression, short history)."""


class CollisionError(CrashDetError):
    """Invalid input to the collision cascade."""


class FlowError(CrashDetError):
    """Optical flow / descriptor input errors."""


class ModelFormatError(CrashDetError):
    """SVM model file is truncated, inconsistent, or has an unknown version."""


class TrainingError(CrashDetError):
    """Training data unusable (single class, bad dimensions, non-finite values)."""


class ConfigError(CrashDetError):
    """One or more configuration problems; ``errors`` lists all of them."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ReporterError(CrashDetError):
    """Incident reporting failure (bad camera config, persistence I/O)."""
