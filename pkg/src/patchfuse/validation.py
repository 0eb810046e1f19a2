"""Input-validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_rgb_stack(X, name="X"):
    """Validate a stack of images shaped (n, H, W, 3); returns a float64 view."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must be shaped (n, H, W, 3), got {X.shape}")
    return X


def check_rgb_image(pixels, name="pixels"):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[-1] != 3:
        raise ValueError(f"{name} must be shaped (H, W, 3), got {pixels.shape}")
    return pixels


def check_binary_labels(y, n=None, name="y"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise ValueError(f"{name} has {len(y)} entries, expected {n}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 (benign) and 1 (malignant)")
    return y.astype(np.int64)


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )
