"""Training steps for every method and split-level IoU evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .consistency import STRONG, WEAK, AugmentationSpec, augment, consistency_target, threshold_multiclass, threshold_multilabel
from .losses import weighted_ce
from .matching import assign_labels
from .model import PixelModel
from .pool import reference_from_features
from .synth import MULTI_CLASS, MULTI_LABEL

log = logging.getLogger(__name__)

BASELINE = "baseline"
PSEUDOLABEL = "pseudolabel"
NEAREST_NEIGHBOR = "nearest-neighbor"
FIXMATCH = "fixmatch"
RPG = "rpg"
RPG_PLUS = "rpg-plus"
METHODS = (BASELINE, PSEUDOLABEL, NEAREST_NEIGHBOR, FIXMATCH, RPG, RPG_PLUS)
TAU_METHODS = (PSEUDOLABEL, FIXMATCH, RPG_PLUS)
MATCHING_METHODS = (NEAREST_NEIGHBOR, RPG, RPG_PLUS)
CONSISTENCY_METHODS = (FIXMATCH, RPG_PLUS)


@dataclass
class LossReport:
    supervised: float = 0.0
    rpg: float = 0.0
    pseudolabel: float = 0.0
    consistency: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)

    def as_row(self):
        return {
            "supervised": self.supervised,
            "rpg": self.rpg,
            "pseudolabel": self.pseudolabel,
            "consistency": self.consistency,
            "total": self.total,
            **{f"n_{k}": v for k, v in self.counts.items()},
        }


@dataclass
class StepBatch:
    """Labeled pool images (which double as the reference pool) and unlabeled images."""

    labeled_images: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_images: np.ndarray
    labeled_ids: tuple = ()
    unlabeled_ids: tuple = ()


@dataclass
class StepSettings:
    method: str
    task: str
    n_classes: int
    s: int = 64
    k: int = 7000
    tau: float | None = None
    unlabeled_weight: float = 1.0
    consistency_weight: float = 1.0
    augment_labeled: bool = True
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)
    n_jobs: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if (self.method in TAU_METHODS) != (self.tau is not None):
            raise ValueError(f"tau is {'required' if self.method in TAU_METHODS else 'not used'} for {self.method}")

    @property
    def multilabel(self):
        return self.task == MULTI_LABEL


def _threshold(probs, tau, multilabel):
    return threshold_multilabel(probs, tau) if multilabel else threshold_multiclass(probs, tau)


def compute_step(model: PixelModel, batch: StepBatch, settings: StepSettings, rng):
    """Forward every view once, build all targets and return the losses.

    Returns ``(LossReport, grad_logits, record)``; ``grad_logits`` matches
    the model's cached forward over ``[labeled, unlabeled views..., strong views...]``.
    Targets (pseudo-labels, weights, thresholded predictions) are constants.
    """
    method = settings.method
    multilabel = settings.multilabel
    record = {"labeled_ids": list(map(int, batch.labeled_ids)), "unlabeled_ids": list(map(int, batch.unlabeled_ids)), "aug": []}

    lab_imgs, lab_labels = [], []
    for i, (img, lab) in enumerate(zip(batch.labeled_images, batch.labeled_labels)):
        if settings.augment_labeled:
            img, lab, rec = augment(img, lab, WEAK, rng.derive(f"labeled-{i}"), settings.aug)
            record["aug"].append({"view": f"labeled-{i}", **rec.as_dict()})
        lab_imgs.append(img)
        lab_labels.append(lab)
    views = list(lab_imgs)
    p = len(views)

    use_unlabeled = method != BASELINE and len(batch.unlabeled_images) > 0
    u_imgs, strong_recs = [], []
    if use_unlabeled:
        for i, img in enumerate(batch.unlabeled_images):
            if method == PSEUDOLABEL:
                u_imgs.append(np.asarray(img, dtype=np.float32))
                continue
            img, _, rec = augment(img, None, WEAK, rng.derive(f"weak-{i}"), settings.aug)
            record["aug"].append({"view": f"weak-{i}", **rec.as_dict()})
            u_imgs.append(img)
        views += u_imgs
        if method in CONSISTENCY_METHODS:
            for i, img in enumerate(u_imgs):
                simg, _, rec = augment(img, None, STRONG, rng.derive(f"strong-{i}"), settings.aug)
                record["aug"].append({"view": f"strong-{i}", **rec.as_dict()})
                strong_recs.append(rec)
                views.append(simg)
    u = len(u_imgs)

    feats, pred = model.forward(np.stack(views))
    logits = pred.logits
    grad = np.zeros_like(logits)
    report = LossReport()

    lab_target = np.stack(lab_labels).astype(np.int64)
    loss, g, cnt = weighted_ce(logits[:p], lab_target, None, multilabel)
    report.supervised, report.counts["supervised"] = loss, cnt
    grad[:p] += g

    if use_unlabeled and method in MATCHING_METHODS:
        pool = reference_from_features(feats[:p], lab_target, settings.s, settings.s, image_ids=batch.labeled_ids)
        targets, weights = [], []
        for i in range(u):
            res = assign_labels(feats[p + i], pool, settings.k, settings.n_classes, n_jobs=settings.n_jobs)
            targets.append(res.labels)
            weights.append(np.ones_like(res.weights) if method == NEAREST_NEIGHBOR else res.weights)
        loss, g, cnt = weighted_ce(logits[p : p + u], np.stack(targets).astype(np.int64), np.stack(weights), multilabel)
        report.rpg, report.counts["rpg"] = loss, cnt
        report.counts["rpg_zero_weight"] = int((np.stack(weights) == 0).sum())
        grad[p : p + u] += settings.unlabeled_weight * g

    if use_unlabeled and method == PSEUDOLABEL:
        target = np.stack([_threshold(pr, settings.tau, multilabel) for pr in pred.probs[p : p + u]])
        loss, g, cnt = weighted_ce(logits[p : p + u], target, None, multilabel)
        report.pseudolabel, report.counts["pseudolabel"] = loss, cnt
        grad[p : p + u] += settings.unlabeled_weight * g

    if use_unlabeled and method in CONSISTENCY_METHODS:
        targets = [
            consistency_target(pred.probs[p + i], strong_recs[i], settings.tau, multilabel) for i in range(u)
        ]
        loss, g, cnt = weighted_ce(logits[p + u :], np.stack(targets), None, multilabel)
        report.consistency, report.counts["consistency"] = loss, cnt
        grad[p + u :] += settings.consistency_weight * g

    report.total = (
        report.supervised
        + settings.unlabeled_weight * (report.rpg + report.pseudolabel)
        + settings.consistency_weight * report.consistency
    )
    return report, grad, record


def train_step(model: PixelModel, batch: StepBatch, settings: StepSettings, rng,
               lr: float = 5e-4, weight_decay: float = 5e-4):
    """One optimisation step; returns ``(LossReport, record)``."""
    report, grad, record = compute_step(model, batch, settings, rng)
    if not np.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss {report.as_row()}")
    model.adam_step(model.backward(grad), lr=lr, weight_decay=weight_decay)
    return report, record


def train_step_rpg(batch, model, settings: StepSettings, rng, **opt):
    if settings.method not in (RPG, NEAREST_NEIGHBOR):
        raise ValueError("train_step_rpg expects method 'rpg' or 'nearest-neighbor'")
    return train_step(model, batch, settings, rng, **opt)


def train_step_rpg_plus(batch, model, settings: StepSettings, rng, **opt):
    if settings.method != RPG_PLUS:
        raise ValueError("train_step_rpg_plus expects method 'rpg-plus'")
    return train_step(model, batch, settings, rng, **opt)


def train_step_baselines(batch, model, settings: StepSettings, rng, **opt):
    if settings.method not in (BASELINE, PSEUDOLABEL, NEAREST_NEIGHBOR, FIXMATCH):
        raise ValueError(f"{settings.method} is not a baseline method")
    return train_step(model, batch, settings, rng, **opt)


@dataclass
class IoUReport:
    per_class: np.ndarray
    miou: float
    intersection: np.ndarray
    union: np.ndarray
    excluded: list = field(default_factory=list)


def predict_labels(model: PixelModel, images, chunk: int = 16):
    """Argmax maps (multi-class) or 0.5-thresholded masks (multi-label)."""
    out = []
    for start in range(0, len(images), chunk):
        probs = model.predict_proba(images[start : start + chunk])
        if model.task == MULTI_CLASS:
            out.append(probs.argmax(axis=1))
        else:
            out.append((probs > 0.5).astype(np.int64))
    return np.concatenate(out)


def iou_from_predictions(pred, gt, n_classes: int, task: str) -> IoUReport:
    """Per-class IoU accumulated over the whole split.

    Classes whose prediction and ground truth are both empty are left out of
    the mean (and listed in ``excluded``).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    inter = np.zeros(n_classes, dtype=np.int64)
    union = np.zeros(n_classes, dtype=np.int64)
    for j in range(n_classes):
        if task == MULTI_CLASS:
            pj, gj = pred == j, gt == j
        else:
            pj, gj = pred[:, j].astype(bool), gt[:, j].astype(bool)
        inter[j] = np.count_nonzero(pj & gj)
        union[j] = np.count_nonzero(pj | gj)
    per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    excluded = np.flatnonzero(union == 0).tolist()
    if excluded:
        log.info("classes %s have empty union; excluded from mIoU", excluded)
    included = per_class[union > 0]
    miou = float(included.mean()) if len(included) else float("nan")
    return IoUReport(per_class, miou, inter, union, excluded)


def evaluate(model: PixelModel, images, labels) -> IoUReport:
    return iou_from_predictions(predict_labels(model, images), labels, model.n_classes, model.task)
