"""Numerical toolkit for invariant circles near a separatrix of area-preserving maps."""

__version__ = "0.1.0"

from ._validation import ConvergenceError, DomainError

__all__ = ["ConvergenceError", "DomainError", "__version__"]
