"""Small input-validation helpers shared across modules."""

import numbers

import numpy as np


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_vector(x, n, name="x"):
    """Return ``x`` as a contiguous float64 1-D array of length ``n``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise ValueError(f"{name} must have shape ({n},), got {x.shape}")
    return x


def check_multivector(X, n, name="X"):
    """Return ``X`` as a C-ordered (n, r) float64 array (DOF-major, lane-minor)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != n or X.shape[1] < 1:
        raise ValueError(f"{name} must have shape ({n}, r>=1), got {X.shape}")
    return X


def check_finite(x, name="x"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")
    return x
