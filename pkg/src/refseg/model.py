"""Per-pixel segmentation model with hand-written backprop.

The model is a fixed filter bank followed by one trainable rectified-linear
layer (together the dense feature extractor) and a linear per-pixel head.
Everything operates on flattened pixels, so a batch of images is just a
longer pixel axis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .synth import MULTI_CLASS, MULTI_LABEL, TASK_KINDS
from .tensor_io import as_rng, load_named_tensors, save_named_tensors
from .validation import check_images

PARAM_NAMES = ("W1", "b1", "W2", "b2")


class FilterBank(TransformerMixin, BaseEstimator):
    """Fixed hand-crafted per-pixel filters.

    Channels: raw intensity, Gaussian blur at ``sigmas``, horizontal and
    vertical gradient, 3x3 local mean and 3x3 local variance (scaled by
    ``variance_scale``), optionally followed by two coordinate channels in
    [-1, 1].

    Nothing is learned; ``fit`` only validates input.
    """

    def __init__(self, sigmas=(1.0, 2.0), variance_scale=25.0, coord_features=False):
        self.sigmas = sigmas
        self.variance_scale = variance_scale
        self.coord_features = coord_features

    @property
    def n_channels(self) -> int:
        return 1 + len(self.sigmas) + 4 + (2 if self.coord_features else 0)

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X):
        X = check_images(X)
        n, _, h, w = X.shape
        out = np.empty((n, self.n_channels, h, w), dtype=np.float64)
        for i in range(n):
            img = X[i, 0].astype(np.float64)
            chans = [img]
            chans += [ndimage.gaussian_filter(img, s, mode="nearest") for s in self.sigmas]
            chans.append(ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=1, mode="nearest"))
            chans.append(ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=0, mode="nearest"))
            mean = ndimage.uniform_filter(img, 3, mode="nearest")
            sq = ndimage.uniform_filter(img * img, 3, mode="nearest")
            chans.append(mean)
            chans.append(np.maximum(sq - mean * mean, 0.0) * self.variance_scale)
            if self.coord_features:
                yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
                chans += [yy, xx]
            out[i] = np.stack(chans)
        return out


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (b, P) filter responses
    pre: np.ndarray  # (d, P) hidden pre-activation
    hidden: np.ndarray  # (d, P) post-activation
    shape: tuple  # (n, h, w)


class MissingForwardCacheError(RuntimeError):
    pass


def softmax(logits, axis=0):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def normalize_logits(logits, task, axis=0):
    return softmax(logits, axis=axis) if task == MULTI_CLASS else sigmoid(logits)


class PixelModel:
    """Filter bank + ReLU hidden layer (features) + linear head (logits).

    Parameters live in ``self.params`` (``W1`` (d,b), ``b1`` (d,), ``W2``
    (c,d), ``b2`` (c,)); Adam moments in ``self.adam_m``/``self.adam_v`` and
    the step counter in ``self.step``.
    """

    def __init__(self, n_classes, task=MULTI_CLASS, hidden=32, bank=None, rng=None):
        if task not in TASK_KINDS:
            raise ValueError(f"task must be one of {TASK_KINDS}")
        self.n_classes = int(n_classes)
        self.task = task
        self.hidden = int(hidden)
        self.bank = bank if bank is not None else FilterBank()
        b = self.bank.n_channels
        gen = as_rng(rng).generator
        lim1 = np.sqrt(6.0 / (b + self.hidden))
        lim2 = np.sqrt(6.0 / (self.hidden + self.n_classes))
        self.params = {
            "W1": gen.uniform(-lim1, lim1, size=(self.hidden, b)),
            "b1": np.zeros(self.hidden),
            "W2": gen.uniform(-lim2, lim2, size=(self.n_classes, self.hidden)),
            "b2": np.zeros(self.n_classes),
        }
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self._cache = None

    @property
    def n_bank_channels(self):
        return self.bank.n_channels

    def bank_responses(self, images):
        """Flattened filter responses ``(b, n*h*w)`` and ``(n, h, w)``."""
        F = self.bank.transform(images)
        n, b, h, w = F.shape
        return F.transpose(1, 0, 2, 3).reshape(b, n * h * w), (n, h, w)

    def forward(self, images, bank_responses=None):
        """Run the model on ``(n,1,h,w)`` (or one ``(1,h,w)``) images.

        Returns ``(features (n,d,h,w), Prediction with (n,c,h,w) arrays)``
        and keeps a cache for :meth:`backward`.
        """
        if bank_responses is None:
            X, shape = self.bank_responses(images)
        else:
            X, shape = bank_responses
        if X.shape[0] != self.params["W1"].shape[1]:
            raise ValueError(f"bank gives {X.shape[0]} channels, W1 expects {self.params['W1'].shape[1]}")
        pre = self.params["W1"] @ X + self.params["b1"][:, None]
        hidden = np.maximum(pre, 0.0)
        logits = self.params["W2"] @ hidden + self.params["b2"][:, None]
        self._cache = ForwardCache(X, pre, hidden, shape)
        n, h, w = shape
        feats = hidden.reshape(self.hidden, n, h, w).transpose(1, 0, 2, 3)
        logits = logits.reshape(self.n_classes, n, h, w).transpose(1, 0, 2, 3)
        return feats, Prediction(logits, normalize_logits(logits, self.task, axis=1))

    def backward(self, grad_logits, cache=None):
        """Parameter gradients for upstream ``d loss / d logits`` of shape (n,c,h,w)."""
        cache = cache if cache is not None else self._cache
        if cache is None:
            raise MissingForwardCacheError("backward called before forward")
        n, h, w = cache.shape
        G = np.asarray(grad_logits, dtype=np.float64)
        if G.shape != (n, self.n_classes, h, w):
            raise ValueError(f"gradient shape {G.shape} != {(n, self.n_classes, h, w)}")
        G = G.transpose(1, 0, 2, 3).reshape(self.n_classes, -1)
        grads = {"W2": G @ cache.hidden.T, "b2": G.sum(axis=1)}
        dA = (self.params["W2"].T @ G) * (cache.pre > 0)
        grads["W1"] = dA @ cache.inputs.T
        grads["b1"] = dA.sum(axis=1)
        return grads

    def adam_step(self, grads, lr=5e-4, weight_decay=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        """Adam with decoupled weight decay applied to every parameter."""
        for name in PARAM_NAMES:
            if grads[name].shape != self.params[name].shape:
                raise ValueError(f"gradient for {name} has shape {grads[name].shape}")
        self.step += 1
        t = self.step
        for name in PARAM_NAMES:
            g = grads[name]
            m = self.adam_m[name] = beta1 * self.adam_m[name] + (1 - beta1) * g
            v = self.adam_v[name] = beta2 * self.adam_v[name] + (1 - beta2) * g * g
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            p = self.params[name]
            p -= lr * weight_decay * p
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def features(self, images):
        return self.forward(images)[0]

    def predict_proba(self, images):
        return self.forward(images)[1].probs

    def copy(self):
        other = PixelModel.__new__(PixelModel)
        other.n_classes, other.task, other.hidden, other.bank = self.n_classes, self.task, self.hidden, self.bank
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        other.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        other.step = self.step
        other._cache = None
        return other

    def save(self, directory):
        tensors = {k: v.astype(np.float32) for k, v in self.params.items()}
        tensors.update({f"adam_m.{k}": v.astype(np.float32) for k, v in self.adam_m.items()})
        tensors.update({f"adam_v.{k}": v.astype(np.float32) for k, v in self.adam_v.items()})
        tensors["step"] = np.array([self.step], dtype=np.float32)
        save_named_tensors(tensors, directory)
        meta = {
            "n_classes": self.n_classes,
            "task": self.task,
            "hidden": self.hidden,
            "bank": self.bank.get_params(),
        }
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "model.json")) as fh:
            meta = json.load(fh)
        bank_params = meta["bank"]
        bank_params["sigmas"] = tuple(bank_params["sigmas"])
        model = cls(meta["n_classes"], meta["task"], meta["hidden"], bank=FilterBank(**bank_params))
        tensors = load_named_tensors(directory)
        for name in PARAM_NAMES:
            model.params[name] = tensors[name].astype(np.float64)
            model.adam_m[name] = tensors[f"adam_m.{name}"].astype(np.float64)
            model.adam_v[name] = tensors[f"adam_v.{name}"].astype(np.float64)
        model.step = int(tensors["step"][0])
        return model


def is_multilabel(task):
    return task == MULTI_LABEL
