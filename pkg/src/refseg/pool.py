"""Labeled pool sampling and reference-set construction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .synth import MULTI_CLASS, CoverageError
from .tensor_io import as_rng

MAX_COVERAGE_RETRIES = 100


class PoolWarning(UserWarning):
    pass


@dataclass
class PoolConfig:
    """Pool image count ``p``, subsample side ``s`` and neighbour count ``k``.

    ``k`` is either an absolute count or a string percentage such as
    ``"50%"`` of the reference-set size ``p*s*s``.
    """

    p: int = 3
    s: int = 64
    k: object = 7000

    def __post_init__(self):
        if int(self.p) < 1:
            raise ValueError("pool size p must be >= 1")
        if int(self.s) < 1:
            raise ValueError("subsample side s must be >= 1")
        parse_k(self.k)

    def resolve(self, height: int, width: int | None = None):
        """Return ``(p, s_h, s_w, k)`` with ``s`` clamped to the image and ``k`` to ``M``.

        Clamping is reported through :class:`PoolWarning`.
        """
        width = height if width is None else width
        p = int(self.p)
        s_h, s_w = min(int(self.s), height), min(int(self.s), width)
        if (s_h, s_w) != (int(self.s), int(self.s)):
            warnings.warn(f"s={self.s} exceeds image side; clamped to {s_h}x{s_w}", PoolWarning, stacklevel=2)
        m = p * s_h * s_w
        k = resolve_k(self.k, m)
        return p, s_h, s_w, k


def parse_k(k):
    """``7000`` -> ``("abs", 7000)``; ``"25%"`` or ``0.25`` as fraction -> ``("frac", 0.25)``."""
    if isinstance(k, str):
        text = k.strip()
        if text.endswith("%"):
            frac = float(text[:-1]) / 100.0
            if not 0 < frac <= 1:
                raise ValueError(f"k percentage must lie in (0, 100], got {k!r}")
            return "frac", frac
        k = int(text)
    if isinstance(k, float) and not float(k).is_integer():
        raise ValueError(f"fractional k must be written as a percentage, got {k!r}")
    if int(k) < 1:
        raise ValueError(f"k must be >= 1, got {k!r}")
    return "abs", int(k)


def resolve_k(k, m: int) -> int:
    kind, value = parse_k(k)
    if kind == "frac":
        return max(1, min(m, int(np.floor(value * m))))
    if value > m:
        warnings.warn(f"k={value} exceeds reference-set size {m}; clamped", PoolWarning, stacklevel=3)
        return m
    return value


def coverage_matrix(labels, task: str, n_classes: int) -> np.ndarray:
    """Per-image category presence, shape (n_images, n_categories).

    Multi-class categories are the class indices; multi-label categories are
    the class bits followed by background (an all-zero label vector).
    """
    labels = np.asarray(labels)
    n = len(labels)
    if task == MULTI_CLASS:
        flat = labels.reshape(n, -1)
        out = np.zeros((n, n_classes), dtype=bool)
        for i in range(n):
            out[i] = np.bincount(flat[i], minlength=n_classes)[:n_classes] > 0
        return out
    flat = labels.reshape(n, n_classes, -1).astype(bool)
    bits = flat.any(axis=2)
    background = (~flat.any(axis=1)).any(axis=1)
    return np.concatenate([bits, background[:, None]], axis=1)


def sample_pool(labels, p: int, rng, task: str = MULTI_CLASS, n_classes: int | None = None,
                max_retries: int = MAX_COVERAGE_RETRIES, presence=None):
    """Sample ``p`` labeled-image indices whose union covers every category.

    Draws uniformly without replacement (with replacement when fewer than
    ``p`` images exist) and redraws up to ``max_retries`` times. If that
    fails, the image adding the most uncovered categories is added greedily
    and the remaining slots keep the last uniform draw. Raises
    :class:`CoverageError` when even all labeled images miss a category.
    """
    if presence is None:
        if n_classes is None:
            raise ValueError("n_classes required when presence is not given")
        presence = coverage_matrix(labels, task, n_classes)
    presence = np.asarray(presence, dtype=bool)
    n_images, n_cats = presence.shape
    if n_images == 0:
        raise ValueError("labeled set is empty")
    if p < 1:
        raise ValueError("p must be >= 1")
    if not presence.any(axis=0).all():
        missing = np.flatnonzero(~presence.any(axis=0)).tolist()
        raise CoverageError(f"categories {missing} absent from every labeled image")
    gen = as_rng(rng).generator
    replace = n_images < p
    idx = None
    for _ in range(max_retries):
        idx = gen.choice(n_images, size=p, replace=replace)
        if presence[idx].any(axis=0).all():
            return idx
    chosen = []
    covered = np.zeros(n_cats, dtype=bool)
    while not covered.all():
        gain = (presence & ~covered).sum(axis=1)
        best = int(np.argmax(gain))
        chosen.append(best)
        covered |= presence[best]
    if len(chosen) > p:
        warnings.warn(f"coverage needs {len(chosen)} images but p={p}; pool is partial", PoolWarning, stacklevel=2)
        return np.array(chosen[:p])
    rest = [i for i in idx.tolist() if i not in chosen] if not replace else idx.tolist()
    fill = rest[: p - len(chosen)]
    while len(chosen) + len(fill) < p:
        fill.append(int(gen.integers(n_images)))
    return np.array(chosen + fill)


def subsample_indices(side: int, s: int) -> np.ndarray:
    """Nearest-neighbour source indices ``floor((i + 0.5) * side / s)``."""
    i = np.arange(s, dtype=np.int64)
    return ((2 * i + 1) * side) // (2 * s)


@dataclass
class ReferencePool:
    """Flattened (feature vector, label) pairs from the pool images.

    ``labels`` is (M,) class indices or (M, c) bit vectors; ``image_ids``
    and ``coords`` record where each reference came from.
    """

    vectors: np.ndarray
    labels: np.ndarray
    image_ids: np.ndarray = field(default=None)
    coords: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.labels = np.asarray(self.labels)
        if self.vectors.ndim != 2:
            raise ValueError(f"reference vectors must be (M, d), got {self.vectors.shape}")
        if len(self.labels) != len(self.vectors):
            raise ValueError("reference vectors and labels differ in length")

    def __len__(self):
        return len(self.vectors)

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2


def reference_from_features(features, labels, s_h: int, s_w: int | None = None, image_ids=None) -> ReferencePool:
    """Subsample per-image feature maps ``(p,d,h,w)`` and labels to ``s_h x s_w``.

    Features and labels are gathered with one shared index grid, so every
    pair stays co-located; labels are never interpolated.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    p, d, h, w = features.shape
    s_w = s_h if s_w is None else s_w
    if s_h > h or s_w > w:
        warnings.warn(f"subsample {s_h}x{s_w} exceeds {h}x{w}; clamped", PoolWarning, stacklevel=2)
        s_h, s_w = min(s_h, h), min(s_w, w)
    rows = subsample_indices(h, s_h)
    cols = subsample_indices(w, s_w)
    sub = features[:, :, rows][:, :, :, cols]
    vectors = sub.transpose(0, 2, 3, 1).reshape(-1, d)
    if labels.ndim == 3:
        lab = labels[:, rows][:, :, cols].reshape(-1)
    else:
        lab = labels[:, :, rows][:, :, :, cols].transpose(0, 2, 3, 1).reshape(-1, labels.shape[1])
    ids = np.arange(p) if image_ids is None else np.asarray(image_ids)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords = np.tile(np.stack([rr.ravel(), cc.ravel()], axis=1), (p, 1))
    return ReferencePool(vectors, lab, np.repeat(ids, s_h * s_w), coords)


def build_reference_set(images, labels, model, s: int, image_ids=None) -> ReferencePool:
    """Run the model's feature extractor on pool images and subsample."""
    feats, _ = model.forward(images)
    return reference_from_features(feats, labels, s, s, image_ids=image_ids)
