"""Per-pixel cross-entropy losses returning gradients w.r.t. logits."""

import numpy as np

from .consistency import IGNORE


def _log_softmax(logits, axis):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_ce(logits, target, weights=None):
    """Weighted softmax cross-entropy averaged over non-ignored pixels.

    ``logits`` (n, c, h, w); ``target`` (n, h, w) class indices or IGNORE;
    ``weights`` (n, h, w) or None. Returns ``(loss, grad, n_valid)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} != {(n, h, w)}")
    valid = target != IGNORE
    if valid.any() and target[valid].max() >= c:
        raise ValueError(f"target class index >= {c}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(logits), 0
    wgt = valid.astype(np.float64)
    if weights is not None:
        wgt = wgt * np.asarray(weights, dtype=np.float64)
    safe = np.where(valid, target, 0)
    logp = _log_softmax(logits, axis=1)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = float(-(wgt * picked).sum() / n_valid)
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= (wgt / n_valid)[:, None]
    return loss, grad, n_valid


def binary_ce(logits, target, weights=None):
    """Weighted per-channel binary cross-entropy over non-ignored entries.

    ``target`` (n, c, h, w) in {0, 1, IGNORE}; ``weights`` (n, h, w) applies
    to every class channel of a pixel.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits {logits.shape}")
    valid = target != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(logits), 0
    wgt = valid.astype(np.float64)
    if weights is not None:
        wgt = wgt * np.asarray(weights, dtype=np.float64)[:, None]
    y = np.where(valid, target, 0).astype(np.float64)
    # softplus(z) - y*z, stable for large |z|
    per = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    loss = float((wgt * per).sum() / n_valid)
    sig = np.where(logits >= 0, 1.0 / (1.0 + np.exp(-np.abs(logits))), np.exp(-np.abs(logits)) / (1.0 + np.exp(-np.abs(logits))))
    grad = (sig - y) * wgt / n_valid
    return loss, grad, n_valid


def weighted_ce(logits, target, weights=None, multilabel=False):
    """Dispatch to :func:`binary_ce` or :func:`softmax_ce`."""
    if multilabel:
        return binary_ce(logits, target, weights)
    return softmax_ce(logits, target, weights)
