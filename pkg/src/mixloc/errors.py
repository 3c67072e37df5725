"""Exception types shared across the package."""


class MixlocError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(MixlocError, ValueError):
    """Operand shapes or channel counts do not line up."""


class DegenerateNormalizationError(MixlocError, ArithmeticError):
    """The per-sample normalization sum of a similarity map is too close to zero."""


class NumericalInstabilityError(MixlocError, ArithmeticError):
    """A loss, gradient, or parameter became non-finite during optimization."""


class FileFormatError(MixlocError, ValueError):
    """A binary or JSON artifact has the wrong magic, version, or payload size."""


class ConfigError(MixlocError, ValueError):
    """A configuration value is invalid or a requested setup is infeasible."""
