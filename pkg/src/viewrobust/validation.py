"""Input validation helpers shared across the package.

Every public entry point funnels its array-like inputs through these
checks so that malformed data fails loudly, with the offending field
named, instead of propagating NaNs into the pipeline.
"""

import numpy as np


class ValidationError(ValueError):
    """An input failed structural validation (shape, range, finiteness)."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class DegeneratePoseError(ValueError):
    """A camera position coincides with the look-at target."""


def as_float_array(x, name, shape=None):
    """Coerce to a float64 ndarray, checking shape and finiteness."""
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: not interpretable as a float array ({exc})")
    if shape is not None and arr.shape != tuple(shape):
        raise ValidationError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_finite_scalar(x, name):
    val = float(x)
    if not np.isfinite(val):
        raise ValidationError(f"{name}: must be finite, got {x!r}")
    return val


def check_positive_int(n, name):
    if int(n) != n or int(n) < 1:
        raise ValidationError(f"{name}: must be a positive integer, got {n!r}")
    return int(n)


def check_nonnegative(x, name):
    val = check_finite_scalar(x, name)
    if val < 0:
        raise ValidationError(f"{name}: must be >= 0, got {val}")
    return val


def check_in_range(x, lo, hi, name):
    val = check_finite_scalar(x, name)
    if not (lo <= val <= hi):
        raise ValidationError(f"{name}: must lie in [{lo}, {hi}], got {val}")
    return val


def check_unit_interval_array(x, name, shape=None):
    arr = as_float_array(x, name, shape=shape)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValidationError(f"{name}: entries must lie in [0, 1]")
    return arr


def check_simplex(w, name, atol=1e-8):
    arr = as_float_array(w, name)
    if arr.ndim != 1:
        raise ValidationError(f"{name}: expected a 1-d weight vector, got shape {arr.shape}")
    if np.any(arr < -atol):
        raise ValidationError(f"{name}: weights must be nonnegative")
    if abs(arr.sum() - 1.0) > atol:
        raise ValidationError(f"{name}: weights must sum to 1, got {arr.sum()!r}")
    return arr
