"""Exception types shared across the package."""


class SiamMMError(Exception):
    """Base class for all package errors."""


class DegenerateResultantError(SiamMMError, ValueError):
    """Weighted resultant is too short to define a mean direction."""


class DataFormatError(SiamMMError, ValueError):
    """A dataset or snapshot file could not be parsed."""


class StaleTapeError(SiamMMError, RuntimeError):
    """Backward was called with a tape recorded before a parameter update."""


class NumericalError(SiamMMError, ArithmeticError):
    """A loss or gradient became non-finite; training halts."""
