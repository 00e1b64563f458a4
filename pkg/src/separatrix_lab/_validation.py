"""Small argument checks shared by the public entry points."""
from __future__ import annotations

import math
from typing import Any

import numpy as np


class DomainError(ValueError):
    """A point or parameter lies outside the region where an operation is defined."""


class ConvergenceError(RuntimeError):
    """An iterative solve did not reach its tolerance."""


def check_finite(name: str, value: Any) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return arr


def check_positive(name: str, value: float, strict: bool = True) -> float:
    value = float(value)
    bad = not math.isfinite(value) or (value <= 0 if strict else value < 0)
    if bad:
        kind = "positive" if strict else "non-negative"
        raise DomainError(f"{name} must be {kind}, got {value!r}")
    return value


def check_interval(name: str, value: float, lo: float, hi: float,
                   closed: tuple[bool, bool] = (True, True)) -> float:
    value = float(value)
    lo_ok = value >= lo if closed[0] else value > lo
    hi_ok = value <= hi if closed[1] else value < hi
    if not (math.isfinite(value) and lo_ok and hi_ok):
        left = "[" if closed[0] else "("
        right = "]" if closed[1] else ")"
        raise DomainError(f"{name}={value!r} not in {left}{lo}, {hi}{right}")
    return value


def check_int(name: str, value: Any, minimum: int | None = None,
              maximum: int | None = None) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise DomainError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise DomainError(f"{name} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise DomainError(f"{name} must be <= {maximum}, got {value}")
    return value
