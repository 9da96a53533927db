"""Parameter vectors, masked datasets, seeded randomness and dense oracles.

Parameter vectors are plain 1-D ``float64`` numpy arrays; :func:`as_param`
validates them.  A :class:`Dataset` never deletes rows: removal flips an
``active`` mask so every consumer (forgetter, retrain oracle, reports) sees
the same stable indexing.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    IndexAlreadyRemoved,
    IndexOutOfRange,
    OracleFailure,
)

__all__ = [
    "as_param",
    "AccessAudit",
    "Dataset",
    "dataset_remove",
    "RngStream",
    "seeded_rng",
    "dense_solve",
    "EpochBatcher",
]


def as_param(x, dim: Optional[int] = None, name: str = "parameter") -> np.ndarray:
    """Return ``x`` as a finite 1-D float64 array, optionally checking its length."""
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"{name} has dim {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return arr


@dataclass
class AccessAudit:
    """Read counters shared by a dataset and every masked copy derived from it."""

    active_reads: int = 0
    removed_reads: int = 0

    def reset(self) -> None:
        self.active_reads = 0
        self.removed_reads = 0


@dataclass(frozen=True)
class Dataset:
    """Ordered datums with an active mask.

    Parameters
    ----------
    X : ndarray, shape (n, d)
        Feature rows.  Never reordered or deleted.
    y : ndarray of int, shape (n,), optional
        Labels (class ids for the classifier, true cluster ids for GMM data).
    active : ndarray of bool, shape (n,)
        ``True`` for datums that are still part of the training set.
    """

    X: np.ndarray
    y: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None
    audit: AccessAudit = field(default_factory=AccessAudit, compare=False, repr=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DimensionMismatch("dataset items must be vectors of a common dimension")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.array(self.y, dtype=np.int64, copy=True).reshape(-1)
            if y.shape[0] != X.shape[0]:
                raise DimensionMismatch("labels and items differ in length")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)
        if self.active is None:
            active = np.ones(X.shape[0], dtype=bool)
        else:
            active = np.array(self.active, dtype=bool, copy=True).reshape(-1)
            if active.shape[0] != X.shape[0]:
                raise DimensionMismatch("mask and items differ in length")
        active.setflags(write=False)
        object.__setattr__(self, "active", active)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def removed_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.active)

    def is_active(self, idx: int) -> bool:
        return bool(self.active[idx])

    def take(self, idx) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Rows ``idx`` as ``(X, y)``; reads of removed rows are counted."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexOutOfRange(f"index outside [0, {self.n})")
        removed = int(np.count_nonzero(~self.active[idx]))
        self.audit.removed_reads += removed
        self.audit.active_reads += idx.size - removed
        return self.X[idx], (None if self.y is None else self.y[idx])

    def active_data(self) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """All active rows as ``(X, y)``."""
        self.audit.active_reads += self.n_active
        X = self.X[self.active]
        return X, (None if self.y is None else self.y[self.active])

    def remove(self, idx: Iterable[int]) -> "Dataset":
        return dataset_remove(self, idx)

    def restore_all(self) -> "Dataset":
        """Copy with every datum active again (shares the audit counters)."""
        return Dataset(self.X, self.y, None, audit=self.audit)

    # -- CSV ---------------------------------------------------------------
    def to_csv(self, path: Union[str, Path, None] = None) -> str:
        """Serialize items (and labels) as CSV; the mask is not serialized."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = [f"x{k}" for k in range(self.dim)]
        if self.y is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(self.n):
            row = [repr(float(v)) for v in self.X[i]]
            if self.y is not None:
                row.append(str(int(self.y[i])))
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, source: Union[str, Path]) -> "Dataset":
        """Read a dataset written by :meth:`to_csv` (path or CSV text)."""
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = source
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        has_label = header[-1] == "label"
        n_feat = len(header) - int(has_label)
        X = np.array([[float(v) for v in r[:n_feat]] for r in body], dtype=np.float64)
        X = X.reshape(len(body), n_feat)
        y = np.array([int(r[-1]) for r in body], dtype=np.int64) if has_label else None
        return cls(X, y)


def dataset_remove(d: Dataset, idx: Iterable[int]) -> Dataset:
    """Masked copy of ``d`` with ``idx`` deactivated.

    Raises
    ------
    IndexOutOfRange
        If any index is outside ``[0, n)``.
    IndexAlreadyRemoved
        If any index is already inactive (or repeated within ``idx``).
    """
    idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
    idx = idx.reshape(-1)
    if idx.size == 0:
        return d
    if idx.min() < 0 or idx.max() >= d.n:
        raise IndexOutOfRange(f"index outside [0, {d.n})")
    if np.unique(idx).size != idx.size:
        raise IndexAlreadyRemoved("duplicate indices in removal request")
    if not np.all(d.active[idx]):
        bad = idx[~d.active[idx]]
        raise IndexAlreadyRemoved(f"indices already removed: {bad.tolist()}")
    active = d.active.copy()
    active[idx] = False
    return Dataset(d.X, d.y, active, audit=d.audit)


class RngStream:
    """Named, seeded random stream (PCG64).

    Standard-normal draws use numpy's ziggurat transform
    (``Generator.standard_normal``): mean 0, variance 1.  ``normal(var=v)``
    returns ``sqrt(v) * standard_normal``, i.e. its argument is a *variance*.
    Sub-streams from :meth:`spawn` are derived with ``SeedSequence`` spawn
    keys, so they are independent of each other and of the parent.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"

    def spawn(self, key: int) -> "RngStream":
        return RngStream(self.seed, self.key + (int(key),))

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def normal(self, var: float = 1.0, size=None) -> np.ndarray:
        return np.sqrt(var) * self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def seeded_rng(seed: int) -> RngStream:
    """Deterministic stream: identical seeds give identical draw sequences."""
    return RngStream(seed)


def dense_solve(H, v) -> np.ndarray:
    """Solve ``H x = v`` for symmetric positive definite ``H`` by Cholesky.

    Used only as a desk-scale oracle for inverse Hessian-vector products.

    Raises
    ------
    OracleFailure
        If ``H`` is not symmetric positive definite or the residual contract
        ``||Hx - v|| <= 1e-10 ||v||`` fails.
    """
    H = np.asarray(H, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise DimensionMismatch("H must be square")
    if H.shape[1] != v.shape[0]:
        raise DimensionMismatch(f"H is {H.shape}, v has dim {v.shape[0]}")
    if not np.allclose(H, H.T, rtol=1e-12, atol=0.0):
        raise OracleFailure("H is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise OracleFailure(f"H is not positive definite: {exc}") from exc
    x = scipy.linalg.cho_solve(factor, v)
    # one refinement step keeps the residual contract on moderately conditioned H
    x = x + scipy.linalg.cho_solve(factor, v - H @ x)
    if np.linalg.norm(H @ x - v) > 1e-10 * max(np.linalg.norm(v), np.finfo(float).tiny):
        raise OracleFailure("residual contract violated; H too ill-conditioned")
    return x


class EpochBatcher:
    """Uniform mini-batches without replacement, reshuffled every epoch.

    Yields positions in ``range(n)``.  When ``batch_size >= n`` every batch
    is the full range and the stream is never consumed.
    """

    def __init__(self, n: int, batch_size: int, rng: RngStream):
        if n <= 0:
            raise ValueError("cannot batch an empty set")
        self.n = int(n)
        self.batch_size = min(int(batch_size), self.n)
        self.rng = rng
        self._full = np.arange(self.n)
        self._perm = None
        self._pos = self.n

    def next(self) -> np.ndarray:
        if self.batch_size == self.n:
            return self._full
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out
