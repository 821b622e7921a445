"""Exception hierarchy shared by every module."""


class MfpmpError(Exception):
    """Base class for all package errors."""


class ModelError(MfpmpError, ValueError):
    """A model instance is malformed or fails validation."""


class BlowUpError(MfpmpError, FloatingPointError):
    """A trajectory left the admissible region or became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SupportError(MfpmpError, ValueError):
    """A phase measure is outside the ball where the Hamiltonian is finite."""


class ConfigError(MfpmpError, ValueError):
    """A run configuration is invalid."""
