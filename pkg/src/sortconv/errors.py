"""Exception types raised across the package."""


class SortConvError(Exception):
    """Base class for every error raised by sortconv."""


class ShapeError(SortConvError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigurationError(SortConvError, ValueError):
    """An unknown mode, op kind, variant name or invalid layer setting."""


class ContractError(SortConvError, RuntimeError):
    """A documented precondition of an operation was violated."""


class ParseError(SortConvError, ValueError):
    """A data or report file does not follow its documented layout."""


class TrainingError(SortConvError, RuntimeError):
    """Training diverged (non-finite loss) or received unusable data."""


class UnsupportedOperationError(SortConvError, TypeError):
    """The operation is not defined for this kind of model."""
