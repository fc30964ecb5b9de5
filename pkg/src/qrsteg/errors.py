"""Exception types shared across the package."""


class QRStegError(Exception):
    """Base class for all package errors."""


class CapacityExceeded(QRStegError):
    pass


class UnsupportedVersion(QRStegError):
    pass


class ShapeMismatch(QRStegError, ValueError):
    pass


class SingularMatrix(QRStegError):
    pass


class NonFiniteValue(QRStegError, FloatingPointError):
    pass


class NonFiniteLoss(NonFiniteValue):
    """Raised by a training step; ``diagnostics`` holds the offending seeds and spec."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(QRStegError):
    pass


class EmptyDataset(QRStegError):
    pass
