"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed argument: non-finite logits, bad context shape, etc."""


class InvalidParameterError(ValueError):
    """Parameter outside its legal range (e.g. beta not in (0,1))."""


class DivergenceInfiniteError(ArithmeticError):
    """A divergence is +inf because of a support violation."""


class LogOfZeroError(ArithmeticError):
    """Log-probability requested for a zero-probability token."""


class NumericOverflowError(ArithmeticError):
    """A parameter update would produce non-finite values."""


class ParseError(ValueError):
    """Malformed serialized file; message carries line/field context."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, regime mismatch)."""


class PipelineError(RuntimeError):
    """Multi-stage run could not be threaded together."""
