"""Input validation helpers, in the spirit of ``sklearn.utils.validation``.

scikit-learn's own checkers assume 2-D tabular data; these accept the
3-D grids used throughout the package.
"""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ValidationError


def check_volume(values, *, name="volume", allow_nan=False, ndim=3):
    """Return ``values`` as a C-contiguous float64 array of the given rank."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise ValidationError(f"{name} has an empty axis: shape {arr.shape}")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_mask(bits, shape=None, *, name="mask"):
    arr = np.asarray(bits)
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{name} must be binary (0/1)")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != tuple(shape):
        raise ValidationError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return np.ascontiguousarray(arr)


def check_spacing(spacing, ndim=3):
    sp = tuple(float(s) for s in spacing)
    if len(sp) != ndim:
        raise ValidationError(f"spacing must have {ndim} components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValidationError(f"spacing components must be positive, got {sp}")
    return sp


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_odd(value, name):
    value = check_positive_int(value, name)
    if value % 2 == 0:
        raise ValidationError(f"{name} must be odd, got {value}")
    return value


def check_rng(seed):
    """Turn ``None``, an int, a SeedSequence or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_same_geometry(a, b, what="grids"):
    if a.dims != b.dims:
        raise ValidationError(f"{what} differ in dims: {a.dims} vs {b.dims}")
