"""Exception types shared across the package."""


class DcapError(Exception):
    """Base class for all package errors."""


class ShapeError(DcapError, ValueError):
    """Operand dimensions do not agree."""


class GeometryError(DcapError, ValueError):
    """A window, kernel or padding produces an empty or impossible output."""


class ProbeError(DcapError, FloatingPointError):
    """Finite-difference probing hit a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(DcapError, ValueError):
    """Invalid model, synthesis or run configuration."""


class FormatError(DcapError, ValueError):
    """Malformed file contents (PGM, labels, tensors, checkpoints)."""

    def __init__(self, message, offset=None, line=None):
        super().__init__(message)
        self.offset = offset
        self.line = line


class TrainingDivergedError(DcapError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ReportUndefinedError(DcapError, ValueError):
    """Evaluation requested with no ground truth to score against."""
