"""Exception types raised across the package."""


class EsPretrainError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EsPretrainError, ValueError):
    """Invalid shapes, inconsistent configs or out-of-range hyperparameters."""


class NumericalError(EsPretrainError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class DataError(EsPretrainError, ValueError):
    """Corpus or batch contents cannot be scored."""


class ParseError(EsPretrainError, ValueError):
    """A metrics or checkpoint file is malformed."""
