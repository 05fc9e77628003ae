"""Input validation helpers used by the estimators and generators."""

import numpy as np

from .exceptions import ConfigError


def as_float_array(x, name="array", ndim=None, allow_empty=False):
    """Convert to a C-contiguous float64 array and reject non-finite entries.

    Parameters
    ----------
    x : array_like
        Input values.
    name : str
        Name used in error messages.
    ndim : int, optional
        Required number of dimensions.
    allow_empty : bool
        Whether a zero-size array is acceptable.
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ConfigError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ConfigError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values")
    return arr


def as_2d_params(theta, name="params"):
    """Coerce parameter vectors to shape (n_points, n_params)."""
    arr = as_float_array(theta, name=name)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be at most 2-dimensional, got shape {arr.shape}")
    return arr


def check_strictly_increasing(t, name="times"):
    t = as_float_array(t, name=name, ndim=1)
    if t.size < 2:
        raise ConfigError(f"{name} must contain at least 2 points")
    if np.any(np.diff(t) <= 0):
        raise ConfigError(f"{name} must be strictly increasing")
    return t


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be strictly positive, got {value!r}")
    return float(value)


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ConfigError(f"{name} must be nonnegative, got {value!r}")
    return float(value)


def check_consistent_length(a, b, name_a="first input", name_b="second input"):
    if len(a) != len(b):
        raise ConfigError(
            f"{name_a} and {name_b} have inconsistent lengths: {len(a)} vs {len(b)}"
        )
