"""Exception types shared across the package."""


class KgtnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(KgtnError):
    """Operands have incompatible shapes."""


class UnboundInputError(KgtnError):
    """evaluate() was called without a binding for a named input."""


class NumericsError(KgtnError):
    """A NaN or Inf appeared, or a denominator fell below its guard."""


class FormatError(KgtnError):
    """A file does not match its documented byte/text layout."""


class DataError(KgtnError):
    """A dataset or split violates a consistency rule."""
