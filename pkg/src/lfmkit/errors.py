class LFMError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LFMError, ValueError):
    pass


class ContainerError(LFMError):
    pass


class ConfigError(LFMError, ValueError):
    pass


class NumericalError(LFMError, ArithmeticError):
    pass


class PoleError(NumericalError):
    """A closed-form optical relation hit its singularity."""
