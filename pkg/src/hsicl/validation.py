"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeError


def check_patches(X, dtype=np.float32, bands: int | None = None, patch_size: int | None = None) -> np.ndarray:
    """Validate a stack of square patches shaped ``(n, p, p, bands)``."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1] != X.shape[2]:
        raise ShapeError(f"expected patches shaped (n, p, p, bands), got {X.shape}")
    if bands is not None and X.shape[3] != bands:
        raise ShapeError(f"patches have {X.shape[3]} bands, model expects {bands}")
    if patch_size is not None and X.shape[1] != patch_size:
        raise ShapeError(f"patches are {X.shape[1]}x{X.shape[1]}, model expects {patch_size}x{patch_size}")
    return X


def check_multilabel_targets(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2 or len(y) != n_samples:
        raise ShapeError(f"multi-label targets must be (n_samples, n_classes) with n_samples={n_samples}, got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("multi-label targets must be binary")
    return y.astype(np.float32)


def check_class_ids(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ShapeError(f"class ids must be a vector of length {n_samples}, got {y.shape}")
    if y.dtype.kind == "f":
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("class ids must be integers")
    return y.astype(np.int64)
