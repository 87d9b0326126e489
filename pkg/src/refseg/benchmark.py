"""Random matcher instances, oracle comparison and kernel timing."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .matching import assign_labels, blas_threads, brute_force_oracle
from .pool import ReferencePool, resolve_k
from .tensor_io import as_rng

K_CHOICES = (1, "10%", "50%", "100%")
M_CHOICES = (1000, 5000, 12288)
C_CHOICES = (2, 3, 5)


@dataclass
class Instance:
    queries: np.ndarray
    pool: ReferencePool
    k: int
    n_classes: int
    n_categories: int


def random_instance(rng, n_queries=4096, n_refs=None, dim=16, k=None, n_categories=None, multilabel=None) -> Instance:
    """Draw a matcher instance; unspecified settings are drawn from the acceptance grid.

    Features are non-negative (as after a ReLU) with a few duplicated
    references and queries equal to references, so exact ties occur.
    """
    gen = as_rng(rng).generator
    M = int(n_refs if n_refs is not None else gen.choice(M_CHOICES))
    C = int(n_categories if n_categories is not None else gen.choice(C_CHOICES))
    multilabel = bool(gen.integers(2)) if multilabel is None else multilabel
    k_spec = k if k is not None else K_CHOICES[int(gen.integers(len(K_CHOICES)))]
    R = np.maximum(gen.standard_normal((M, dim)), 0.0)
    U = np.maximum(gen.standard_normal((n_queries, dim)), 0.0)
    n_dup = min(10, M // 2)
    R[:n_dup] = R[M - n_dup:]
    U[: min(20, n_queries)] = R[gen.integers(M, size=min(20, n_queries))]
    if multilabel:
        n_classes = C - 1
        labels = (gen.random((M, n_classes)) < 0.4).astype(np.uint8)
    else:
        n_classes = C
        labels = gen.integers(C, size=M).astype(np.int64)
    return Instance(U, ReferencePool(R, labels), resolve_k(k_spec, M), n_classes, C)


@dataclass
class OracleComparison:
    cases: int
    max_label_mismatches: int
    total_label_mismatches: int
    max_weight_deviation: float
    seconds: float


def compare_with_oracle(cases: int, seed: int = 0, n_queries: int = 4096, dim: int = 16, n_jobs=1) -> OracleComparison:
    """Run the fast path and the brute-force oracle on ``cases`` random instances."""
    root = as_rng(seed)
    worst_labels = total = 0
    worst_w = 0.0
    start = time.perf_counter()
    with blas_threads(1):
        for i in range(cases):
            inst = random_instance(root.derive(f"case-{i}"), n_queries=n_queries, dim=dim)
            fast = assign_labels(inst.queries, inst.pool, inst.k, inst.n_classes, n_jobs=n_jobs)
            slow = brute_force_oracle(inst.queries, inst.pool, inst.k, inst.n_classes)
            diff = fast.labels != slow.labels
            mismatches = int(diff.any(axis=1).sum() if diff.ndim == 2 else diff.sum())
            worst_labels = max(worst_labels, mismatches)
            total += mismatches
            worst_w = max(worst_w, float(np.abs(fast.weights - slow.weights).max()))
    return OracleComparison(cases, worst_labels, total, worst_w, time.perf_counter() - start)


def time_assign(n_queries=4096, n_refs=12288, dim=32, k=7000, n_classes=4, n_jobs=1, repeats=3, seed=0) -> float:
    """Best-of-``repeats`` wall time of one :func:`assign_labels` call."""
    gen = as_rng(seed).generator
    U = gen.random((n_queries, dim))
    pool = ReferencePool(gen.random((n_refs, dim)), gen.integers(n_classes, size=n_refs))
    best = np.inf
    with blas_threads(1):
        for _ in range(repeats):
            t = time.perf_counter()
            assign_labels(U, pool, k, n_classes, n_jobs=n_jobs)
            best = min(best, time.perf_counter() - t)
    return best
