"""Input validation helpers shared by the functional API and the estimators."""
import numbers

import numpy as np


def check_image(img, name="image", min_size=2, finite=True):
    """Return ``img`` as a float64 (H, W, C) array.

    2-D inputs are promoted to a single channel. Values are not clipped.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected (H, W, C) array, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"{name}: spatial dims must be >= {min_size}, got {arr.shape[:2]}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_image_batch(X, name="X", multiple_of=None):
    """Validate a batch of images, returning a float64 (N, H, W, C) array."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name}: expected (N, H, W, C) array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if multiple_of is not None:
        h, w = arr.shape[1:3]
        if h % multiple_of or w % multiple_of:
            raise ValueError(
                f"{name}: spatial dims {h}x{w} must be multiples of {multiple_of}"
            )
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ValueError(
            f"shape mismatch: {names[0]} has {a.shape}, {names[1]} has {b.shape}"
        )


def check_scalar(value, name, low=None, high=None, include_low=True, include_high=True):
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite")
    if low is not None and (value < low or (value == low and not include_low)):
        raise ValueError(f"{name}={value} out of range (low={low})")
    if high is not None and (value > high or (value == high and not include_high)):
        raise ValueError(f"{name}={value} out of range (high={high})")
    return value


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` from an int seed or generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, numbers.Integral):
        return np.random.default_rng(int(seed))
    raise TypeError(f"cannot build a Generator from {seed!r}")
