"""Exception hierarchy shared across the package."""


class SemiSdfError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SemiSdfError, ValueError):
    pass


class ShapeError(SemiSdfError, ValueError):
    pass


class GraphError(SemiSdfError, ValueError):
    """Bad autodiff usage: shape mismatch, backward misuse."""


class NumericError(SemiSdfError, ArithmeticError):
    """A forward computation produced NaN or Inf."""


class LossError(SemiSdfError, ValueError):
    pass


class DatasetError(SemiSdfError, ValueError):
    pass


class CheckpointError(SemiSdfError, IOError):
    pass


class EvaluationError(SemiSdfError, ValueError):
    pass
