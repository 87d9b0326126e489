"""Synthetic segmentation scenes with texture-coded classes.

Each foreground class owns an intensity level and a stripe texture
(amplitude, spatial frequency); shapes are disks, rectangles or rings placed
at random, so a class cannot be read off from position. Multi-class scenes
paint shapes in order and the last one wins; multi-label scenes add the
class contributions and keep every covering bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor_io import SeededRng, as_rng, write_pgm, write_tensor

MULTI_CLASS = "multi-class"
MULTI_LABEL = "multi-label"
TASK_KINDS = (MULTI_CLASS, MULTI_LABEL)
SHAPES = ("disk", "rectangle", "ring")


class CoverageError(RuntimeError):
    """Raised when a labeled split cannot be made to contain every class."""


@dataclass
class ClassStyle:
    intensity: float
    texture_amplitude: float
    texture_frequency: float


def default_palette(n_styles: int, additive: bool = False, background: float = 0.15) -> list:
    """Per-class intensity and texture parameters.

    Painted (multi-class) styles get evenly spread intensities and alternating
    texture strength. Additive (multi-label) styles alternate between
    intensity-coded classes, whose increments over ``background`` are powers
    of two so overlaps sum to distinct levels, and texture-coded classes that
    add a strong zero-mean stripe pattern.
    """
    if additive:
        return _additive_palette(n_styles, background)
    styles = []
    for j in range(n_styles):
        styles.append(
            ClassStyle(
                intensity=0.3 + 0.3 * j / max(n_styles - 1, 1),
                texture_amplitude=(0.02, 0.12, 0.06)[j % 3],
                texture_frequency=(0.10, 0.25, 0.40)[j % 3],
            )
        )
    return styles


def _additive_palette(n_styles, background):
    coded = [j for j in range(n_styles) if j % 2 == 0]
    unit = 0.6 / (2 ** len(coded) - 1)
    styles = []
    for j in range(n_styles):
        if j % 2 == 0:
            inc = unit * 2 ** coded.index(j)
            styles.append(ClassStyle(background + inc, 0.02, 0.10))
        else:
            styles.append(ClassStyle(background, 0.15, (0.25, 0.40)[(j // 2) % 2]))
    return styles


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 4
    task: str = MULTI_CLASS
    shapes_per_image: tuple = (3, 6)
    radius_range: tuple = (5, 13)
    noise_sigma: float = 0.05
    background_intensity: float = 0.15
    # per-image scene gain drawn from 1 +- gain_jitter, offset from +- offset_jitter
    gain_jitter: float = 0.1
    offset_jitter: float = 0.05
    # multi-label: chance a new shape is centred on an existing one
    overlap_prob: float = 0.5
    palette: list = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"task must be one of {TASK_KINDS}, got {self.task!r}")
        if self.height < 4 or self.width < 4:
            raise ValueError("image side must be at least 4")
        if self.n_classes < 2 and self.task == MULTI_CLASS:
            raise ValueError("multi-class scenes need at least 2 classes")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image}")
        if not self.palette:
            self.palette = default_palette(
                self.n_foreground, self.task == MULTI_LABEL, self.background_intensity
            )
        if len(self.palette) != self.n_foreground:
            raise ValueError(f"palette needs {self.n_foreground} entries")

    @property
    def n_foreground(self) -> int:
        return self.n_classes - 1 if self.task == MULTI_CLASS else self.n_classes

    def foreground_class(self, style_index: int) -> int:
        return style_index + 1 if self.task == MULTI_CLASS else style_index


@dataclass
class Dataset:
    spec: SceneSpec
    labeled_images: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_images: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_images)

    def split(self, name: str):
        if name == "labeled":
            return self.labeled_images, self.labeled_labels
        if name == "unlabeled":
            return self.unlabeled_images, None
        if name in ("val", "test"):
            return getattr(self, f"{name}_images"), getattr(self, f"{name}_labels")
        raise KeyError(name)


def shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float, aspect: float = 1.0):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "ring":
        rr = dy * dy + dx * dx
        return (rr <= r * r) & (rr >= (0.55 * r) ** 2)
    if kind == "rectangle":
        return (np.abs(dy) <= r * aspect) & (np.abs(dx) <= r / aspect)
    raise ValueError(f"unknown shape {kind!r}")


def _texture(style: ClassStyle, h, w, gen: np.random.Generator):
    yy, xx = np.mgrid[0:h, 0:w]
    theta = gen.uniform(0, np.pi)
    phase = gen.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * style.texture_frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return style.texture_amplitude * wave


def render_scene(spec: SceneSpec, rng: SeededRng):
    """Return ``(image (1,h,w) float32, label)`` for one random scene."""
    gen = rng.generator
    h, w = spec.height, spec.width
    n_shapes = int(gen.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    image = np.full((h, w), spec.background_intensity, dtype=np.float64)
    if spec.task == MULTI_CLASS:
        label = np.zeros((h, w), dtype=np.uint8)
    else:
        label = np.zeros((spec.n_classes, h, w), dtype=np.uint8)
    centres = []
    for _ in range(n_shapes):
        style_idx = int(gen.integers(spec.n_foreground))
        style = spec.palette[style_idx]
        kind = SHAPES[int(gen.integers(len(SHAPES)))]
        r = gen.uniform(*spec.radius_range)
        if spec.task == MULTI_LABEL and centres and gen.random() < spec.overlap_prob:
            base = centres[int(gen.integers(len(centres)))]
            cy = base[0] + gen.uniform(-r, r) * 0.6
            cx = base[1] + gen.uniform(-r, r) * 0.6
        else:
            cy, cx = gen.uniform(0, h), gen.uniform(0, w)
        centres.append((cy, cx))
        mask = shape_mask(kind, h, w, cy, cx, r, aspect=gen.uniform(0.6, 1.6))
        content = style.intensity + _texture(style, h, w, gen)
        cls = spec.foreground_class(style_idx)
        if spec.task == MULTI_CLASS:
            image[mask] = content[mask]
            label[mask] = cls
        else:
            image[mask] += content[mask] - spec.background_intensity
            label[cls][mask] = 1
    gain = 1.0 + gen.uniform(-spec.gain_jitter, spec.gain_jitter)
    offset = gen.uniform(-spec.offset_jitter, spec.offset_jitter)
    image = image * gain + offset
    image = image + gen.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image[None], label


def classes_present(labels, task: str, n_classes: int) -> np.ndarray:
    """Boolean vector of which classes occur anywhere in ``labels``."""
    labels = np.asarray(labels)
    if task == MULTI_CLASS:
        return np.bincount(labels.reshape(-1), minlength=n_classes)[:n_classes] > 0
    axes = tuple(i for i in range(labels.ndim) if i != labels.ndim - 3)
    return labels.any(axis=axes)


def _render_many(spec, rng, prefix, n):
    images = np.zeros((n, 1, spec.height, spec.width), dtype=np.float32)
    if spec.task == MULTI_CLASS:
        labels = np.zeros((n, spec.height, spec.width), dtype=np.uint8)
    else:
        labels = np.zeros((n, spec.n_classes, spec.height, spec.width), dtype=np.uint8)
    for i in range(n):
        images[i], labels[i] = render_scene(spec, rng.derive(f"{prefix}-{i}"))
    return images, labels


def generate_dataset(
    spec: SceneSpec,
    rng,
    n_labeled: int,
    n_unlabeled: int,
    n_val: int,
    n_test: int,
    max_retries: int = 50,
) -> Dataset:
    """Generate disjoint labeled/unlabeled/val/test splits from ``rng``.

    The labeled split is regenerated (up to ``max_retries`` times) until every
    class, background included, has at least one pixel in it.
    """
    if n_labeled < 1:
        raise ValueError("n_labeled must be at least 1")
    for name, n in (("n_unlabeled", n_unlabeled), ("n_val", n_val), ("n_test", n_test)):
        if n < 0:
            raise ValueError(f"{name} must be non-negative")
    rng = as_rng(rng)
    labeled = None
    for attempt in range(max_retries):
        images, labels = _render_many(spec, rng.derive(f"labeled-attempt-{attempt}"), "img", n_labeled)
        if classes_present(labels, spec.task, spec.n_classes).all():
            labeled = images, labels
            break
    if labeled is None:
        raise CoverageError(
            f"no labeled split of {n_labeled} images covered all {spec.n_classes} classes "
            f"after {max_retries} attempts"
        )
    unlabeled, _ = _render_many(spec, rng.derive("unlabeled"), "img", n_unlabeled)
    val_images, val_labels = _render_many(spec, rng.derive("val"), "img", n_val)
    test_images, test_labels = _render_many(spec, rng.derive("test"), "img", n_test)
    return Dataset(spec, labeled[0], labeled[1], unlabeled, val_images, val_labels, test_images, test_labels)


def write_dataset(dataset: Dataset, out_dir, label_format: str = "pgm") -> str:
    """Write every split under ``out_dir``; returns the manifest path.

    Images go to ``images/<split>-<i>.rgtf`` (float32, (1,h,w)); multi-class
    labels to PGM (or uint8 rgtf), multi-label masks to uint8 (c,h,w) rgtf.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    multi_label = dataset.spec.task == MULTI_LABEL
    rows = []
    for split in ("labeled", "unlabeled", "val", "test"):
        images, labels = dataset.split(split)
        for i, image in enumerate(images):
            name = f"{split}-{i:04d}"
            write_tensor(np.asarray(image, dtype=np.float32), os.path.join(out_dir, "images", name + ".rgtf"))
            label_path = "-"
            if labels is not None:
                if multi_label or label_format == "rgtf":
                    label_path = os.path.join("labels", name + ".rgtf")
                    write_tensor(np.asarray(labels[i], dtype=np.uint8), os.path.join(out_dir, label_path))
                else:
                    label_path = os.path.join("labels", name + ".pgm")
                    write_pgm(labels[i], os.path.join(out_dir, label_path))
            rows.append(f"{split}\t{os.path.join('images', name + '.rgtf')}\t{label_path}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write(f"# task={dataset.spec.task} n_classes={dataset.spec.n_classes}\n")
        fh.write("\n".join(rows) + "\n")
    return manifest


def read_manifest(path):
    """Parse a dataset manifest into ``{split: [(image_path, label_path_or_None)]}``."""
    base = os.path.dirname(path)
    out = {}
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for item in line[1:].split():
                    key, _, value = item.partition("=")
                    meta[key] = value
                continue
            split, image, label = line.split("\t")
            out.setdefault(split, []).append(
                (os.path.join(base, image), None if label == "-" else os.path.join(base, label))
            )
    return out, meta
