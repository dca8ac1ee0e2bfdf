"""Exception hierarchy. The CLI maps each family to an exit code."""


class MicroError(Exception):
    """Base class for all engine errors."""


class ShapeError(MicroError, ValueError):
    """Operands with incompatible dimensions."""


class DataError(MicroError, ValueError):
    """Malformed or degenerate input data."""


class ConfigError(MicroError, ValueError):
    """Invalid configuration or conflicting options."""


class IncompatibleArtifactError(MicroError):
    """A checkpoint, cache or split does not fit the dataset it is used with."""


class NumericalError(MicroError, ArithmeticError):
    """NaN/Inf encountered, or a quantity that must be nonzero was zero."""
