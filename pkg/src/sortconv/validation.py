"""Input checks shared by the estimator API and the command line."""
import math

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ConfigurationError, ShapeError


def check_images(X, dtype=np.float64, channels=1):
    """Coerce ``X`` to an ``N x C x H x W`` float array.

    Accepts ``(N, H, W)`` stacks, ``(N, C, H, W)`` batches and flattened
    ``(N, H*W)`` rows of square single-channel images. Non-finite values
    are rejected.
    """
    X = check_array(X, dtype=dtype, allow_nd=True, ensure_2d=True)
    if X.ndim == 2:
        side = math.isqrt(X.shape[1])
        if channels != 1 or side * side != X.shape[1]:
            raise ShapeError(
                f"flattened input with {X.shape[1]} features is not a square image")
        X = X.reshape(len(X), 1, side, side)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ShapeError(f"expected images of rank 2 to 4, got shape {X.shape}")
    if X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channel(s), got {X.shape[1]}")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples):
    """1-d label vector of length ``n_samples``."""
    y = np.asarray(y)
    if y.ndim != 1:
        y = np.ravel(y) if y.ndim == 2 and y.shape[1] == 1 else y
    if y.ndim != 1:
        raise ShapeError(f"labels must be one-dimensional, got shape {y.shape}")
    if len(y) != n_samples:
        raise ShapeError(f"{n_samples} images but {len(y)} labels")
    return y


def parse_angles(text):
    """``'0,30,60'`` or ``'0:360:30'`` (start:stop:step) -> list of ints."""
    text = str(text).strip()
    try:
        if ":" in text:
            start, stop, step = (int(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            angles = list(range(start, stop, step))
        else:
            angles = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad angle list {text!r}: {exc}") from None
    if not angles:
        raise ConfigurationError(f"angle list {text!r} is empty")
    if len(set(angles)) != len(angles):
        raise ConfigurationError(f"angle list {text!r} repeats an angle")
    return angles


def check_positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
