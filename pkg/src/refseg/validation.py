"""Input checks shared by the estimators."""

import numpy as np

from .synth import MULTI_CLASS


def check_images(X, allow_single=True):
    """Return ``X`` as a float array of shape (n, ch, h, w).

    A single ``(ch, h, w)`` image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, ch, h, w), got {X.shape}")
    if X.shape[1] != 1:
        raise ValueError(f"expected single-channel images, got {X.shape[1]} channels")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_label_maps(y, task, n_classes, shape=None):
    """Validate label maps: (n,h,w) class indices or (n,c,h,w) binary masks."""
    y = np.asarray(y)
    if task == MULTI_CLASS:
        if y.ndim == 2:
            y = y[None]
        if y.ndim != 3:
            raise ValueError(f"multi-class labels must be (n, h, w), got {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"class indices must lie in 0..{n_classes - 1}")
    else:
        if y.ndim == 3:
            y = y[None]
        if y.ndim != 4 or y.shape[1] != n_classes:
            raise ValueError(f"multi-label masks must be (n, {n_classes}, h, w), got {y.shape}")
        if y.size and not np.isin(y, (0, 1)).all():
            raise ValueError("multi-label masks must be binary")
    if shape is not None and (y.shape[0], *y.shape[-2:]) != tuple(shape):
        raise ValueError(f"label shape {y.shape} does not match images {shape}")
    return y.astype(np.int64)


def check_features(F):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"expected (n_pixels, d) feature vectors, got {F.shape}")
    return F
