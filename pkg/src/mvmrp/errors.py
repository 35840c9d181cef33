from typing import Optional


class MvmrpError(Exception):
    """Base class for all errors raised by the package."""


class FormulaError(MvmrpError, ValueError):
    """Formula could not be parsed or validated."""

    def __init__(self, message: str, offset: Optional[int] = None, expected: Optional[str] = None):
        self.offset = offset
        self.expected = expected
        details = message
        if offset is not None:
            details = f"{details} at byte {offset}"
        if expected:
            details = f"{details} (expected {expected})"
        super().__init__(details)


class DataError(MvmrpError, ValueError):
    """Input tables are missing, malformed or inconsistent."""


class DesignError(DataError):
    """Design matrices cannot be built from the formula and the data."""


class NumericalError(MvmrpError, ArithmeticError):
    """Singular systems, non-finite weights or exhausted damping."""
