"""Nearest-reference pseudo-labels with density-based entropy weights.

For every query pixel vector ``u`` and reference set ``R`` (vectors with
labels):

* distance: ``D(r, u) = 1 - max(<r,u> / (|r| |u| + eps), 0)``
* label: the label of the globally nearest reference (ties -> lowest index)
* class distance ``delta_j``: nearest category-``j`` reference among the
  ``k`` nearest references, 1 when the category is absent there
* probabilities ``P_j = (1 - delta_j + eps) / sum_j' (1 - delta_j' + eps)``
* weight ``W = 1 + sum_j P_j log P_j / log C``

The fast path never materialises a per-pixel sort. References are grouped
by label value; within a block of pixels it takes each group's minimum (value,
index) and tests membership in the k-nearest set against the k-th order
statistic, resolving exact ties by reference index. :func:`brute_force_oracle`
computes the same quantities by fully sorting every pixel's distances.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .pool import ReferencePool, PoolWarning
from .validation import check_features

EPS = 1e-8
DEFAULT_BLOCK = 512
TILE = 64


def worker_count(n_jobs=None) -> int:
    """Resolve a worker count; ``None`` reads ``REFSEG_THREADS`` (0 = all cores)."""
    if n_jobs is None:
        n_jobs = int(os.environ.get("REFSEG_THREADS", "1") or 1)
    n_jobs = int(n_jobs)
    if n_jobs <= 0:
        n_jobs = os.cpu_count() or 1
    return n_jobs


@contextmanager
def blas_threads(n):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n, user_api="blas"):
        yield


def clipped_cosine(r, u, eps: float = EPS) -> float:
    r = np.asarray(r, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if r.shape != u.shape:
        raise ValueError(f"vector lengths differ: {r.shape} vs {u.shape}")
    sim = float(r @ u) / (math.sqrt(float(r @ r)) * math.sqrt(float(u @ u)) + eps)
    return 1.0 - max(sim, 0.0)


def clipped_cosine_matrix(U, R, eps: float = EPS, u_norms=None, r_norms=None):
    """All-pairs distances, shape (len(U), len(R))."""
    U = np.asarray(U, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    nu = np.sqrt(np.einsum("ij,ij->i", U, U)) if u_norms is None else u_norms
    nr = np.sqrt(np.einsum("ij,ij->i", R, R)) if r_norms is None else r_norms
    S = U @ R.T
    S /= nu[:, None] * nr[None, :] + eps
    np.maximum(S, 0.0, out=S)
    np.subtract(1.0, S, out=S)
    return S


def tiled_distances(U, R, eps: float = EPS, r_norms=None):
    """:func:`clipped_cosine_matrix` evaluated on zero-padded tiles of ``TILE`` rows.

    BLAS results can depend on a row's position inside the product, so
    every query row is always computed in a tile of the same shape. For
    blocks starting at multiples of ``TILE`` this makes a pixel's distances
    bit-identical across block sizes, thread counts and the oracle.
    """
    U = np.asarray(U, dtype=np.float64)
    n = len(U)
    out = np.empty((n, len(R)))
    for start in range(0, n, TILE):
        tile = U[start : start + TILE]
        m = len(tile)
        if m < TILE:
            tile = np.concatenate([tile, np.zeros((TILE - m, U.shape[1]))])
        out[start : start + m] = clipped_cosine_matrix(tile, R, eps, r_norms=r_norms)[:m]
    return out


def _aligned_block(block_size) -> int:
    return max(1, -(-int(block_size) // TILE)) * TILE


def category_membership(group_labels, n_classes: int, multilabel: bool) -> np.ndarray:
    """Map distinct reference label values to weighting categories.

    Returns a bool matrix (n_groups, n_categories). Multi-class: category j is
    class j. Multi-label: categories are the ``n_classes`` bits plus a final
    background category for the all-zero vector; a reference counts toward
    every bit it has set.
    """
    group_labels = np.asarray(group_labels)
    if not multilabel:
        return group_labels[:, None] == np.arange(n_classes)[None, :]
    bits = group_labels.astype(bool)
    background = ~bits.any(axis=1)
    return np.concatenate([bits, background[:, None]], axis=1)


def n_categories(n_classes: int, multilabel: bool) -> int:
    return n_classes + 1 if multilabel else n_classes


def class_probabilities(delta, eps: float = EPS):
    score = 1.0 - np.asarray(delta, dtype=np.float64) + eps
    return score / score.sum(axis=-1, keepdims=True)


def entropy_weight(probs):
    """``1 - normalised entropy`` along the last axis, clipped to [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    C = probs.shape[-1]
    if C < 2:
        raise ValueError("entropy weight needs at least two categories")
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return np.clip(1.0 + plogp.sum(axis=-1) / math.log(C), 0.0, 1.0)


def weights_from_delta(delta, eps: float = EPS):
    probs = class_probabilities(delta, eps)
    return probs, entropy_weight(probs)


@dataclass
class PseudoLabelResult:
    """Per-pixel label, weight and diagnostics.

    Arrays are flat over pixels, or reshaped to ``(h, w, ...)`` when the
    query was a feature map.
    """

    labels: np.ndarray
    weights: np.ndarray
    nearest_distance: np.ndarray
    nearest_index: np.ndarray
    class_distances: np.ndarray
    probabilities: np.ndarray

    def reshape(self, h, w):
        def r(a):
            return a.reshape(h, w, *a.shape[1:])

        out = PseudoLabelResult(*(r(getattr(self, f)) for f in self.__dataclass_fields__))
        if out.labels.ndim == 3:
            out.labels = np.moveaxis(out.labels, -1, 0)
        return out


def _query_matrix(features):
    """Accept (N, d) vectors or a (d, h, w) feature map."""
    arr = np.asarray(features)
    if arr.ndim == 3:
        d, h, w = arr.shape
        return arr.reshape(d, h * w).T.astype(np.float64), (h, w)
    return check_features(arr), None


def _resolve(pool: ReferencePool, k, n_classes):
    M = len(pool)
    if M == 0:
        raise ValueError("reference pool is empty")
    multilabel = pool.multilabel
    if n_classes is None:
        n_classes = pool.labels.shape[1] if multilabel else int(pool.labels.max()) + 1
    C = n_categories(n_classes, multilabel)
    if C < 2:
        raise ValueError(f"need at least 2 weighting categories, got {C}")
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > M:
        warnings.warn(f"k={k} exceeds pool size {M}; clamped", PoolWarning, stacklevel=3)
        k = M
    return k, n_classes, C, multilabel


class _GroupedReferences:
    """References reordered so equal label values are contiguous."""

    def __init__(self, pool: ReferencePool, n_classes: int, eps: float):
        labels = pool.labels
        if pool.multilabel:
            values, group_of = np.unique(labels, axis=0, return_inverse=True)
        else:
            values, group_of = np.unique(labels, return_inverse=True)
        group_of = group_of.reshape(-1)
        self.perm = np.argsort(group_of, kind="stable").astype(np.int64)
        counts = np.bincount(group_of, minlength=len(values))
        self.bounds = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.values = values
        self.membership = category_membership(values, n_classes, pool.multilabel)
        # distances are computed in pool order and then permuted, so duplicate
        # references get bit-identical distances regardless of their group
        self.vectors = np.ascontiguousarray(pool.vectors, dtype=np.float64)
        self.norms = np.sqrt(np.einsum("ij,ij->i", self.vectors, self.vectors))
        self.eps = eps


def _lexmin(values, indices):
    """Row-wise minimum of (value, index) pairs over the last axis."""
    vmin = values.min(axis=1)
    masked = np.where(values == vmin[:, None], indices, np.iinfo(np.int64).max)
    pos = masked.argmin(axis=1)
    rows = np.arange(len(values))
    return vmin, indices[rows, pos], pos


def _group_stats(D, bounds, perm, k):
    B, M = D.shape
    rows = np.arange(B)
    n_groups = len(bounds) - 1
    gv = np.empty((B, n_groups))
    gi = np.empty((B, n_groups), dtype=np.int64)
    for g in range(n_groups):
        lo, hi = bounds[g], bounds[g + 1]
        a = D[:, lo:hi].argmin(axis=1)
        gv[:, g] = D[rows, lo + a]
        gi[:, g] = perm[lo + a]
    if k < M:
        kth = np.partition(D, k - 1, axis=1)[:, k - 1]
    else:
        kth = np.full(B, np.inf)
    return gv, gi, kth


def _assign_block(U, refs: _GroupedReferences, k: int, C: int):
    D = tiled_distances(U, refs.vectors, refs.eps, r_norms=refs.norms).take(refs.perm, axis=1)
    gv, gi, kth = _group_stats(D, refs.bounds, refs.perm, k)
    B, M = D.shape
    near_v, near_i, near_g = _lexmin(gv, gi)

    delta = np.ones((B, C))
    for j in range(C):
        groups = np.flatnonzero(refs.membership[:, j])
        if len(groups) == 0:
            continue
        v, i, _ = _lexmin(gv[:, groups], gi[:, groups])
        inside = v < kth
        tie = np.flatnonzero(v == kth)
        if len(tie):
            Dt = D[tie]
            below = (Dt < kth[tie, None]).sum(axis=1)
            earlier = ((Dt == kth[tie, None]) & (refs.perm[None, :] < i[tie, None])).sum(axis=1)
            inside[tie] = below + earlier < k
        delta[:, j] = np.where(inside, v, 1.0)
    return near_g, near_v, near_i, delta


def assign_labels(features, pool: ReferencePool, k, n_classes=None, eps: float = EPS,
                  block_size: int = DEFAULT_BLOCK, n_jobs=None) -> PseudoLabelResult:
    """Pseudo-label every query vector from ``pool`` using blocked exact search.

    ``features`` is (N, d) or a (d, h, w) feature map. Results do not depend
    on ``block_size`` or ``n_jobs``.
    """
    U, hw = _query_matrix(features)
    if U.shape[1] != pool.vectors.shape[1]:
        raise ValueError(f"feature dim {U.shape[1]} != reference dim {pool.vectors.shape[1]}")
    k, n_classes, C, multilabel = _resolve(pool, k, n_classes)
    refs = _GroupedReferences(pool, n_classes, eps)
    N = len(U)
    near_g = np.empty(N, dtype=np.int64)
    near_v = np.empty(N)
    near_i = np.empty(N, dtype=np.int64)
    delta = np.empty((N, C))
    block_size = _aligned_block(block_size)
    starts = list(range(0, N, block_size))

    def run(start):
        stop = min(start + block_size, N)
        g, v, i, dl = _assign_block(U[start:stop], refs, k, C)
        near_g[start:stop], near_v[start:stop], near_i[start:stop], delta[start:stop] = g, v, i, dl

    workers = worker_count(n_jobs)
    if workers > 1 and len(starts) > 1:
        with blas_threads(1), ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, starts))
    else:
        for start in starts:
            run(start)
    probs, weights = weights_from_delta(delta, eps)
    labels = refs.values[near_g]
    result = PseudoLabelResult(labels, weights, near_v, near_i, delta, probs)
    return result.reshape(*hw) if hw else result


def brute_force_oracle(features, pool: ReferencePool, k, n_classes=None, eps: float = EPS,
                       block_size: int = 256) -> PseudoLabelResult:
    """Reference implementation: all N*M distances, full sort per pixel.

    Cost is O(N*M*d) for distances plus O(N*M log M) for sorting; intended
    for verification on small and medium instances only.
    """
    U, hw = _query_matrix(features)
    k, n_classes, C, multilabel = _resolve(pool, k, n_classes)
    R = np.asarray(pool.vectors, dtype=np.float64)
    labels = np.asarray(pool.labels)
    if multilabel:
        cats = np.concatenate([labels.astype(bool), ~labels.astype(bool).any(axis=1, keepdims=True)], axis=1)
    else:
        cats = labels[:, None] == np.arange(C)[None, :]
    cat_cols = [np.flatnonzero(cats[:, j]) for j in range(C)]
    r_norm = np.sqrt(np.einsum("ij,ij->i", R, R))
    N, M = len(U), len(R)
    out_label = np.empty((N,) + labels.shape[1:], dtype=labels.dtype)
    out_index = np.empty(N, dtype=np.int64)
    out_dist = np.empty(N)
    delta = np.empty((N, C))
    block_size = _aligned_block(block_size)
    for start in range(0, N, block_size):
        Ub = U[start : start + block_size]
        # same distance arithmetic as the fast path, so ties are decided on identical values
        D = tiled_distances(Ub, R, eps, r_norms=r_norm)
        ordered = np.sort(D, axis=1)
        first = np.argmax(D == ordered[:, :1], axis=1)
        out_index[start : start + len(Ub)] = first
        out_dist[start : start + len(Ub)] = ordered[:, 0]
        out_label[start : start + len(Ub)] = labels[first]
        # k-nearest membership: everything strictly below the k-th value,
        # then the lowest-index references tied at it until k are taken
        kth = ordered[:, k - 1 : k]
        member = D <= kth
        excess = np.flatnonzero(member.sum(axis=1) > k)
        if len(excess):
            De, ke = D[excess], kth[excess]
            tied = De == ke
            need = k - (De < ke).sum(axis=1, keepdims=True)
            member[excess] = (De < ke) | (tied & (np.cumsum(tied, axis=1) <= need))
        near = np.where(member, D, np.inf)
        for j in range(C):
            if len(cat_cols[j]) == 0:
                delta[start : start + len(Ub), j] = 1.0
                continue
            masked = near[:, cat_cols[j]].min(axis=1)
            delta[start : start + len(Ub), j] = np.where(np.isinf(masked), 1.0, masked)
    probs = np.empty_like(delta)
    weights = np.empty(N)
    for n in range(N):
        scores = [1.0 - delta[n, j] + eps for j in range(C)]
        total = sum(scores)
        ent = 0.0
        for j in range(C):
            pj = scores[j] / total
            probs[n, j] = pj
            ent += pj * math.log(pj)
        weights[n] = min(max(1.0 + ent / math.log(C), 0.0), 1.0)
    result = PseudoLabelResult(out_label, weights, out_dist, out_index, delta, probs)
    return result.reshape(*hw) if hw else result


class ReferencePseudoLabeler(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`assign_labels`.

    ``fit`` stores reference vectors and labels; ``predict`` returns the
    nearest-reference labels and ``transform`` the entropy weights.

    Parameters
    ----------
    k : int or str
        Neighbour count, or a percentage of the reference-set size (``"50%"``).
    n_classes : int, optional
        Number of classes; inferred from the references when omitted.
    eps : float
        Stabilising constant in the distance and probability formulas.
    block_size : int
        Query pixels processed per block.
    n_jobs : int, optional
        Worker threads; ``None`` reads ``REFSEG_THREADS``.
    """

    def __init__(self, k=7000, n_classes=None, eps=EPS, block_size=DEFAULT_BLOCK, n_jobs=None):
        self.k = k
        self.n_classes = n_classes
        self.eps = eps
        self.block_size = block_size
        self.n_jobs = n_jobs

    def fit(self, X, y):
        from .pool import resolve_k

        X = check_features(X)
        y = np.asarray(y)
        self.pool_ = ReferencePool(X, y)
        self.k_ = resolve_k(self.k, len(X))
        self.n_features_in_ = X.shape[1]
        return self

    def assign(self, X) -> PseudoLabelResult:
        check_is_fitted(self, "pool_")
        return assign_labels(X, self.pool_, self.k_, self.n_classes, self.eps, self.block_size, self.n_jobs)

    def predict(self, X):
        return self.assign(X).labels

    def transform(self, X):
        return self.assign(X).weights
