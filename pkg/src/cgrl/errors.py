"""Exception types raised across the package."""


class CGRLError(Exception):
    """Base class for all package errors."""


class FormatError(CGRLError):
    """A dataset directory or file does not follow the on-disk format."""


class ValidationError(CGRLError):
    """Input data violates a structural invariant (ids, splits, normalization)."""


class ParameterError(CGRLError, ValueError):
    """An argument is outside its admissible range."""


class ShapeError(CGRLError, ValueError):
    """Tensor shapes are inconsistent."""


class DivergenceError(CGRLError, FloatingPointError):
    """Training produced a non-finite loss component."""

    def __init__(self, component: str, epoch: int | None = None):
        self.component = component
        self.epoch = epoch
        where = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"non-finite value in loss component '{component}'{where}")
