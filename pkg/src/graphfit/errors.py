"""Exception hierarchy shared by every graphfit module."""


class GraphFitError(Exception):
    """Base class for all errors raised by graphfit."""


class SizeError(GraphFitError, ValueError):
    """Too few points or an empty input where a count is required."""


class DegeneracyError(GraphFitError, ValueError):
    """Coincident or collinear points; no well-defined local frame."""


class ConditioningError(GraphFitError, ArithmeticError):
    """A linear system stayed singular after regularization."""


class ShapeError(GraphFitError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(GraphFitError, ValueError):
    """Invalid or missing configuration (empty dataset, missing checkpoint, ...)."""


class ParseError(GraphFitError, ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class BoundsError(GraphFitError, IndexError):
    """An index points outside its target collection."""


class CheckpointError(GraphFitError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class NonFiniteError(GraphFitError, FloatingPointError):
    """A forward operation produced NaN or Inf."""
