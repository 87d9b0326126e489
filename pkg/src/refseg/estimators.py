"""Scikit-learn style segmenter wrapping the training loop."""

from __future__ import annotations

import math
import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .consistency import AugmentationSpec
from .model import FilterBank, PixelModel
from .pool import PoolConfig, coverage_matrix, sample_pool
from .synth import MULTI_CLASS, TASK_KINDS
from .tensor_io import as_rng
from .trainer import METHODS, StepBatch, StepSettings, evaluate, predict_labels, train_step
from .validation import check_images, check_label_maps


class RPGSegmenter(ClassifierMixin, BaseEstimator):
    """Semi-supervised per-pixel segmenter.

    ``fit(X, y, X_unlabeled=..., X_val=..., y_val=...)`` trains with the
    chosen ``method``; when a validation split is given, the parameters from
    the evaluation with the best validation mIoU are kept (ties go to the
    earlier epoch).

    Parameters
    ----------
    method : str
        One of ``baseline``, ``pseudolabel``, ``nearest-neighbor``,
        ``fixmatch``, ``rpg``, ``rpg-plus``.
    task : str
        ``multi-class`` (labels (n,h,w)) or ``multi-label`` (masks (n,c,h,w)).
    pool_size, subsample, k :
        Reference pool image count, subsample side and neighbour count (an
        int or a percentage string such as ``"50%"``).
    tau : float, optional
        Confidence threshold; required by ``pseudolabel``, ``fixmatch`` and
        ``rpg-plus``.
    epochs, steps_per_epoch, eval_every, iteration_multiplier :
        Schedule. ``steps_per_epoch=None`` means one pass over the unlabeled
        images at ``unlabeled_per_batch`` per step.
    random_state : int or SeededRng
        Root of the RNG tree (``init``, ``pool/epoch-E/step-S``,
        ``batch/...``, ``aug/...``).
    callback : callable, optional
        Called with a dict after every step and every evaluation.
    """

    def __init__(self, method="rpg", task=MULTI_CLASS, n_classes=None, hidden=32,
                 coord_features=False, variance_scale=25.0, pool_size=3, subsample=64,
                 k=7000, tau=None, unlabeled_per_batch=5, unlabeled_weight=1.0,
                 consistency_weight=1.0, lr=5e-4, weight_decay=5e-4, epochs=60,
                 steps_per_epoch=None, eval_every=10, iteration_multiplier=1,
                 augmentation=None, augment_labeled=True, random_state=0, n_jobs=None,
                 callback=None):
        self.method = method
        self.task = task
        self.n_classes = n_classes
        self.hidden = hidden
        self.coord_features = coord_features
        self.variance_scale = variance_scale
        self.pool_size = pool_size
        self.subsample = subsample
        self.k = k
        self.tau = tau
        self.unlabeled_per_batch = unlabeled_per_batch
        self.unlabeled_weight = unlabeled_weight
        self.consistency_weight = consistency_weight
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.eval_every = eval_every
        self.iteration_multiplier = iteration_multiplier
        self.augmentation = augmentation
        self.augment_labeled = augment_labeled
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.callback = callback

    def _validate(self, X, y):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r}")
        X = check_images(X)
        y = np.asarray(y)
        if self.n_classes is not None:
            n_classes = int(self.n_classes)
        elif self.task == MULTI_CLASS:
            n_classes = int(y.max()) + 1
        else:
            n_classes = y.shape[-3]
        y = check_label_maps(y, self.task, n_classes, (X.shape[0], *X.shape[-2:]))
        return X, y, n_classes

    def _n_steps(self, n_unlabeled, p):
        if self.steps_per_epoch is not None:
            return int(self.steps_per_epoch)
        if n_unlabeled:
            return math.ceil(n_unlabeled / self.unlabeled_per_batch)
        return 1

    def fit(self, X, y, X_unlabeled=None, X_val=None, y_val=None):
        X, y, n_classes = self._validate(X, y)
        h, w = X.shape[-2:]
        X_unlabeled = np.zeros((0, 1, h, w), np.float32) if X_unlabeled is None else check_images(X_unlabeled)
        if X_val is not None:
            X_val = check_images(X_val)
            y_val = check_label_maps(y_val, self.task, n_classes, (X_val.shape[0], h, w))
        root = as_rng(self.random_state)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            p, s_h, s_w, k = PoolConfig(self.pool_size, self.subsample, self.k).resolve(h, w)
        self.pool_warnings_ = [str(c.message) for c in caught]
        self.n_classes_ = n_classes
        self.resolved_pool_ = {"p": p, "s": min(s_h, s_w), "k": k}
        settings = StepSettings(
            method=self.method, task=self.task, n_classes=n_classes, s=min(s_h, s_w), k=k,
            tau=self.tau, unlabeled_weight=self.unlabeled_weight,
            consistency_weight=self.consistency_weight, augment_labeled=self.augment_labeled,
            aug=self.augmentation or AugmentationSpec(), n_jobs=self.n_jobs,
        )
        bank = FilterBank(variance_scale=self.variance_scale, coord_features=self.coord_features)
        model = PixelModel(n_classes, self.task, self.hidden, bank=bank, rng=root.derive("init"))
        presence = coverage_matrix(y, self.task, n_classes)

        epochs = int(self.epochs) * int(self.iteration_multiplier)
        n_steps = self._n_steps(len(X_unlabeled), p)
        n_u = min(self.unlabeled_per_batch, len(X_unlabeled))
        self.history_ = []
        self.loss_history_ = []
        best = None
        for epoch in range(1, epochs + 1):
            for step in range(n_steps):
                tag = f"epoch-{epoch}/step-{step}"
                pool_idx = sample_pool(None, p, root.derive_path(f"pool/{tag}"), presence=presence)
                gen = root.derive_path(f"batch/{tag}").generator
                u_idx = gen.choice(len(X_unlabeled), size=n_u, replace=False) if n_u else np.zeros(0, int)
                batch = StepBatch(X[pool_idx], y[pool_idx], X_unlabeled[u_idx], tuple(pool_idx), tuple(u_idx))
                report, record = train_step(model, batch, settings, root.derive_path(f"aug/{tag}"),
                                            lr=self.lr, weight_decay=self.weight_decay)
                self.loss_history_.append(report.total)
                if self.callback:
                    self.callback({"event": "step", "epoch": epoch, "step": step, "loss": report, "record": record})
            if X_val is not None and (epoch % self.eval_every == 0 or epoch == epochs):
                rep = evaluate(model, X_val, y_val)
                self.history_.append((epoch, rep))
                if best is None or rep.miou > best[1]:
                    best = (epoch, rep.miou, model.copy())
                if self.callback:
                    self.callback({"event": "eval", "epoch": epoch, "report": rep, "model": model})
        self.final_model_ = model
        if best is not None:
            self.best_epoch_, self.best_val_miou_, self.model_ = best
        else:
            self.best_epoch_, self.best_val_miou_, self.model_ = epochs, float("nan"), model
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, check_images(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_images(X))

    def transform(self, X):
        """Dense features (n, d, h, w) from the fitted feature extractor."""
        check_is_fitted(self, "model_")
        return self.model_.features(check_images(X))

    def evaluate(self, X, y):
        check_is_fitted(self, "model_")
        y = check_label_maps(y, self.task, self.n_classes_)
        return evaluate(self.model_, check_images(X), y)

    def score(self, X, y, sample_weight=None):
        """Mean IoU on the given split."""
        return self.evaluate(X, y).miou
