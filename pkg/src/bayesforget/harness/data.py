"""Synthetic datasets and removal-set selection for the experiments."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import Dataset, RngStream
from ..errors import DimensionMismatch

__all__ = ["synth_gmm_data", "synth_test_split", "class_removal_indices"]


def synth_gmm_data(n: int, K: int, cluster_means, seed: int) -> Dataset:
    """``n / K`` draws from ``N(mean_k, I)`` per cluster, labelled by cluster.

    Rows are grouped by cluster in order ``0..K-1``.

    Raises
    ------
    DimensionMismatch
        If the means do not form a ``(K, d)`` array.
    ValueError
        If ``n`` is not divisible by ``K``.
    """
    means = np.asarray(cluster_means, dtype=np.float64)
    if means.ndim == 1:
        if means.size % K:
            raise DimensionMismatch("cluster means do not split into K vectors")
        means = means.reshape(K, -1)
    if means.ndim != 2 or means.shape[0] != K:
        raise DimensionMismatch(f"expected {K} cluster means of a common dimension")
    if n % K:
        raise ValueError("n must be divisible by K")
    per = n // K
    rng = RngStream(seed)
    X = np.concatenate([m + rng.standard_normal((per, means.shape[1])) for m in means])
    y = np.repeat(np.arange(K), per)
    return Dataset(X, y)


def synth_test_split(n_test: int, K: int, cluster_means, seed: int) -> Dataset:
    """Held-out draws from the same mixture, on a stream independent of the training data."""
    if n_test <= 0:
        return Dataset(np.zeros((0, np.asarray(cluster_means).size // K)), np.zeros(0, np.int64))
    n_test = (n_test // K) * K
    return synth_gmm_data(n_test, K, cluster_means, (seed + 0x5EED) & 0xFFFFFFFF)


def class_removal_indices(S: Dataset, classes: Sequence[int], per_class: int) -> np.ndarray:
    """The first ``per_class`` indices carrying each label in ``classes``."""
    if S.y is None:
        raise ValueError("dataset has no labels")
    out = []
    for c in classes:
        idx = np.flatnonzero(S.y == c)
        if idx.size < per_class:
            raise ValueError(f"class {c} has only {idx.size} datums")
        out.append(idx[:per_class])
    return np.concatenate(out) if out else np.zeros(0, np.int64)
