"""Input validation helpers shared by the estimators."""
import numpy as np


def check_bit_array(X, ndim=None, name="X"):
    """Return ``X`` as a uint8 array of 0/1 values, raising ValueError otherwise."""
    arr = np.asarray(X)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.uint8, copy=False)


def check_signed_bits(X, name="X"):
    """Validate a {-1, +1} scaled array (the generator's data range)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.size and not np.isin(arr, (-1.0, 1.0)).all():
        raise ValueError(f"{name} must contain only -1 and +1")
    return arr


def check_segments(y, n_segments, name="y"):
    y = np.asarray(y)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError(f"{name} must hold integer segment labels")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_segments):
        raise ValueError(f"{name} labels must lie in [0, {n_segments})")
    return y.astype(np.int64)


def check_probability(p, name, open_low=False, open_high=False):
    p = float(p)
    low_ok = p > 0 if open_low else p >= 0
    high_ok = p < 1 if open_high else p <= 1
    if not (low_ok and high_ok) or np.isnan(p):
        raise ValueError(f"{name} must be a probability, got {p}")
    return p


def bits_to_signed(bits):
    """Map {0, 1} to {-1, +1}."""
    return np.asarray(bits, dtype=np.float32) * 2.0 - 1.0
