"""Exception taxonomy for the toolkit.

Every error raised by this package derives from LdfcError so callers can
catch one type at the boundary.  The CLI maps subtypes to exit codes.
"""


class LdfcError(Exception):
    """Base class for all toolkit errors."""


class FormatError(LdfcError):
    """Malformed container bytes, manifest, or graph structure."""


class ShapeError(LdfcError):
    """Tensor shape or length mismatch."""


class DivergenceError(LdfcError):
    """Layer training produced a non-finite loss."""

    def __init__(self, message: str, iteration: int = -1, lr: float = float("nan")):
        super().__init__(message)
        self.iteration = iteration
        self.lr = lr
