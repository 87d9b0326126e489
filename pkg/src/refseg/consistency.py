"""Weak/strong augmentation and thresholded prediction targets.

Geometric transforms are stored as records (flip flag, rotation angle,
CutOut rectangle) so the exact same nearest-neighbour index map can be
replayed on label maps and pseudo-label targets.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor_io import as_rng

IGNORE = -1
WEAK = "weak"
STRONG = "strong"


@dataclass
class AugmentationSpec:
    flip_p: float = 0.5
    rotation_deg: float = 15.0
    noise_sigma: float = 0.1
    jitter: float = 0.2
    cutout: bool = True
    cutout_area: tuple = (0.05, 0.25)

    def __post_init__(self):
        lo, hi = self.cutout_area
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"cutout_area must satisfy 0 <= lo <= hi <= 1, got {self.cutout_area}")
        if not 0 <= self.flip_p <= 1:
            raise ValueError("flip_p must lie in [0, 1]")


@dataclass
class AugmentRecord:
    kind: str
    flip: bool = False
    angle: float = 0.0
    noise_sigma: float = 0.0
    gain: float = 1.0
    # half-open (row0, col0, row1, col1) or None
    cutout: tuple | None = None

    def as_dict(self):
        return asdict(self)

    @property
    def is_identity_geometry(self):
        return not self.flip and self.angle == 0.0


def geometric_index_map(h: int, w: int, flip: bool = False, angle: float = 0.0):
    """Source (rows, cols) for every output pixel of flip-then-rotate.

    Rotation by ``angle`` degrees about the image centre with
    nearest-neighbour rounding; sources outside the image are clamped to the
    border, so images and labels always use the same map.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if angle:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        t = math.radians(angle)
        c, s = math.cos(t), math.sin(t)
        dy, dx = yy - cy, xx - cx
        sy = cy + c * dy + s * dx
        sx = cx - s * dy + c * dx
        rows = np.clip(np.rint(sy), 0, h - 1).astype(np.int64)
        cols = np.clip(np.rint(sx), 0, w - 1).astype(np.int64)
    else:
        rows, cols = yy.astype(np.int64), xx.astype(np.int64)
    if flip:
        cols = w - 1 - cols
    return rows, cols


def apply_geometry(array, record: AugmentRecord):
    """Apply the record's flip/rotation to the trailing (h, w) axes of ``array``."""
    array = np.asarray(array)
    if record.is_identity_geometry:
        return array.copy()
    h, w = array.shape[-2:]
    rows, cols = geometric_index_map(h, w, record.flip, record.angle)
    return array[..., rows, cols]


def augment(image, label=None, kind: str = WEAK, rng=None, spec: AugmentationSpec | None = None):
    """Augment one ``(ch, h, w)`` image (and optionally its label map).

    Weak: horizontal flip with ``flip_p``. Strong: weak plus rotation,
    intensity gain, additive Gaussian noise and one CutOut rectangle (filled
    with 0). Returns ``(image', label', record)``; the label receives only the
    geometric part.
    """
    spec = spec or AugmentationSpec()
    if kind not in (WEAK, STRONG):
        raise ValueError(f"kind must be 'weak' or 'strong', got {kind!r}")
    gen = as_rng(rng).generator
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    record = AugmentRecord(kind, flip=bool(gen.random() < spec.flip_p))
    if kind == STRONG:
        record.angle = float(gen.uniform(-spec.rotation_deg, spec.rotation_deg))
        record.gain = float(1.0 + gen.uniform(-spec.jitter, spec.jitter))
        record.noise_sigma = float(gen.uniform(0.0, spec.noise_sigma))
        if spec.cutout:
            area = gen.uniform(*spec.cutout_area) * h * w
            aspect = math.exp(gen.uniform(-0.5, 0.5))
            ch = int(min(h, max(1, round(math.sqrt(area * aspect)))))
            cw = int(min(w, max(1, round(area / ch))))
            r0 = int(gen.integers(0, h - ch + 1))
            c0 = int(gen.integers(0, w - cw + 1))
            record.cutout = (r0, c0, r0 + ch, c0 + cw)
    out = apply_geometry(image, record)
    if kind == STRONG:
        out = out * record.gain
        out = out + gen.normal(0.0, 1.0, size=out.shape) * record.noise_sigma
        if record.cutout is not None:
            r0, c0, r1, c1 = record.cutout
            out[..., r0:r1, c0:c1] = 0.0
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    new_label = None if label is None else apply_geometry(label, record)
    return out, new_label, record


def threshold_multiclass(probs, tau: float, class_axis: int = -3):
    """Argmax class where the top probability exceeds ``tau``, else IGNORE."""
    probs = np.asarray(probs)
    c = probs.shape[class_axis]
    if not 1.0 / c < tau < 1.0:
        raise ValueError(f"tau must lie in (1/{c}, 1), got {tau}")
    top = probs.max(axis=class_axis)
    labels = probs.argmax(axis=class_axis).astype(np.int64)
    labels[~(top > tau)] = IGNORE
    return labels


def threshold_multilabel(probs, tau: float):
    """Per-class 0/1 where ``|p - 0.5| > |0.5 - tau|``, else IGNORE for that class."""
    if not 0.5 < tau < 1.0:
        raise ValueError(f"tau must lie in (0.5, 1), got {tau}")
    probs = np.asarray(probs, dtype=np.float64)
    decided = np.abs(probs - 0.5) > abs(0.5 - tau)
    out = (probs > 0.5).astype(np.int64)
    out[~decided] = IGNORE
    return out


def apply_cutout_rule(target, record: AugmentRecord | None, multilabel: bool = False):
    """Force the CutOut rectangle of ``record`` to background in ``target``.

    Multi-class background is class 0, multi-label background the all-zero
    vector; both override IGNORE.
    """
    if record is None:
        raise ValueError("CutOut rule needs the strong augmentation record")
    out = np.array(target, copy=True)
    if record.cutout is None:
        return out
    r0, c0, r1, c1 = record.cutout
    out[..., r0:r1, c0:c1] = 0
    return out


def consistency_target(weak_probs, record: AugmentRecord, tau: float, multilabel: bool):
    """Thresholded weak-branch prediction mapped into the strong view.

    ``weak_probs`` is (c, h, w); the thresholded label is transformed with
    the strong record's geometry and the CutOut area is set to background.
    """
    if multilabel:
        target = threshold_multilabel(weak_probs, tau)
    else:
        target = threshold_multiclass(weak_probs, tau)
    target = apply_geometry(target, record)
    return apply_cutout_rule(target, record, multilabel)
