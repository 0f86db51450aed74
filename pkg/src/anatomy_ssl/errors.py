"""Exception hierarchy shared by every module."""


class AnatomySSLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AnatomySSLError, ValueError):
    """Invalid configuration or violated precondition on an argument."""


class PersistenceError(AnatomySSLError, OSError):
    """Reading or writing an on-disk artifact failed."""


class IntegrityError(AnatomySSLError, ValueError):
    """Shapes or stored metadata disagree with each other."""


class DegenerateInputError(AnatomySSLError, ValueError):
    """Input is well-formed but carries no usable signal (e.g. a constant image)."""


class NumericalError(AnatomySSLError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class EvaluationError(AnatomySSLError, ValueError):
    """An evaluation routine was given data it cannot score (e.g. one class only)."""
