"""Exception types shared across the package."""


class CmdfitError(Exception):
    """Base class for all package errors."""


class OutOfRange(CmdfitError):
    """Query outside the tabulated model domain (age/metallicity off the
    grid, or a mass above the maximum of a bracketing track)."""


class InvalidConfig(CmdfitError):
    """Structurally invalid configuration (non-ascending grids, bad counts)."""


class ParseError(CmdfitError):
    """Malformed input text; carries the offending line number."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ValidationError(CmdfitError):
    """Well-formed input with an invalid value; names the field."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DegenerateRange(CmdfitError):
    """Field-star magnitude range with max <= min."""


class DegenerateSample(CmdfitError):
    """Sample with zero variance where a spread is required."""


class ConstantPredictor(CmdfitError):
    """Regression predictor with zero variance."""


class TooLarge(CmdfitError):
    """Brute-force enumeration exceeding its cell budget."""


class InsufficientStars(CmdfitError):
    """A magnitude cut left too few stars to fit."""


class EmptyConditional(CmdfitError):
    """No retained draws satisfy the requested condition (e.g. no draws
    with a star classified as a member)."""
