"""Seeded cross-validation folds, shared by every model in the pipeline.

The same (n, k, seed) triple always produces the same assignment, which is
what lets the GLM-LASSO, forward-learning, and forest scores for one
variable be compared on identical folds.
"""

from __future__ import annotations

import hashlib

import numpy as np


def fold_assignments(n: int, k: int, seed: int) -> np.ndarray:
    """Fold index per observation; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for i, chunk in enumerate(np.array_split(perm, k)):
        folds[chunk] = i
    return folds


def fold_checksum(folds: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(folds, dtype=np.int64).tobytes()).hexdigest()[:16]
