"""Exceptions raised by the LowFR toolkit."""

from __future__ import annotations


class LowFRError(Exception):
    """Base exception for LowFR errors."""


class DimensionError(LowFRError):
    """Matrix sizes are not conformable or overflow."""


class DomainError(LowFRError):
    """A parameter lies outside its admissible range."""


class InputError(LowFRError):
    """Input data is malformed."""


class DegenerateColumnError(InputError):
    """A data column has too few observations or zero variance."""

    def __init__(self, column: str, reason: str) -> None:
        """Initialize the error.

        Args:
            column: Label of the offending column
            reason: Human readable explanation

        """
        super().__init__(f"Column {column}: {reason}")
        self.column = column


class LayoutError(LowFRError):
    """A parameter vector does not match its layout."""


class SaturationError(LayoutError):
    """An unconstrained value overflows its transform."""


class EvaluationError(LowFRError):
    """The log density evaluated to a non-finite value."""

    def __init__(self, block: str, message: str | None = None) -> None:
        """Initialize the error.

        Args:
            block: Name of the parameter or likelihood block that failed
            message: Optional detail

        """
        super().__init__(message or f"Non-finite log density in block {block}")
        self.block = block


class UsageError(LowFRError):
    """A function was called with an unsupported combination of arguments."""


class AlignmentError(LowFRError):
    """Estimate and truth labels do not line up."""


class ConfigurationError(LowFRError):
    """Run configuration or a supporting file is invalid."""

    def __init__(self, message: str, line: int | None = None) -> None:
        """Initialize the error.

        Args:
            message: Human readable explanation
            line: 1-based line number in the offending file, if known

        """
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class InitializationError(LowFRError):
    """The sampler cannot start from the given point."""


class FitFailure(LowFRError):
    """Sampling failed to produce usable draws."""
