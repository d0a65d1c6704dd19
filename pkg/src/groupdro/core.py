"""Grouped datasets, simplex weights and stratified splitting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from groupdro.errors import InvalidArgument, SplitInfeasible

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    group: int


class GroupedDataset:
    """Immutable set of (x, y, g) triplets stored as dense arrays.

    ``m`` and ``K`` default to one past the largest observed group / label,
    but may be declared explicitly so that ids outside the declared range are
    rejected. Every group in ``0..m-1`` must be nonempty.
    """

    def __init__(self, X, y, g, m: int | None = None, K: int | None = None):
        X = np.array(X, dtype=np.float64, copy=True)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        y = np.array(y, dtype=np.int64, copy=True).reshape(-1)
        g = np.array(g, dtype=np.int64, copy=True).reshape(-1)
        n = X.shape[0]
        if n == 0:
            raise InvalidArgument("dataset has no examples")
        if y.shape[0] != n or g.shape[0] != n:
            raise InvalidArgument("features, labels and groups differ in length")
        if not np.all(np.isfinite(X)):
            raise InvalidArgument("features must be finite")
        if y.min() < 0 or g.min() < 0:
            raise InvalidArgument("labels and groups must be nonnegative")
        m = int(g.max()) + 1 if m is None else int(m)
        K = max(int(y.max()) + 1, 2) if K is None else int(K)
        if g.max() >= m:
            raise InvalidArgument(f"group id {int(g.max())} >= m={m}")
        if y.max() >= K:
            raise InvalidArgument(f"label {int(y.max())} >= K={K}")
        sizes = np.bincount(g, minlength=m)
        empty = np.flatnonzero(sizes == 0)
        if empty.size:
            raise InvalidArgument(f"group {int(empty[0])} is empty")
        for arr in (X, y, g):
            arr.flags.writeable = False
        self.X, self.y, self.g = X, y, g
        self.m, self.K, self.d = m, K, X.shape[1]
        self.group_sizes = sizes
        self.group_sizes.flags.writeable = False
        index = []
        for gid in range(m):
            pos = np.flatnonzero(g == gid)
            pos.flags.writeable = False
            index.append(pos)
        self.group_index = tuple(index)

    @classmethod
    def from_examples(cls, examples: Sequence[Example], m=None, K=None):
        if not examples:
            raise InvalidArgument("dataset has no examples")
        d = len(examples[0].features)
        for ex in examples:
            if len(ex.features) != d:
                raise InvalidArgument("examples differ in feature dimension")
        X = np.array([ex.features for ex in examples], dtype=np.float64)
        return cls(X, [ex.label for ex in examples], [ex.group for ex in examples], m=m, K=K)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def examples(self) -> list[Example]:
        return [self.example(i) for i in range(self.n)]

    def example(self, i: int) -> Example:
        return Example(self.X[i], int(self.y[i]), int(self.g[i]))

    def subset(self, positions) -> "GroupedDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return GroupedDataset(self.X[positions], self.y[positions], self.g[positions], m=self.m, K=self.K)

    def __eq__(self, other):
        if not isinstance(other, GroupedDataset):
            return NotImplemented
        return (
            self.m == other.m
            and self.K == other.K
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.g, other.g)
        )

    def __repr__(self):
        return f"GroupedDataset(n={self.n}, d={self.d}, K={self.K}, m={self.m}, sizes={self.group_sizes.tolist()})"


@dataclass(frozen=True)
class GroupWeights:
    """A point on the probability simplex over ``m`` groups."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64, copy=True).reshape(-1)
        if q.size == 0:
            raise InvalidArgument("weights must have at least one entry")
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise InvalidArgument("weights must be finite and nonnegative")
        if abs(q.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidArgument(f"weights sum to {q.sum()!r}, not 1")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @property
    def m(self) -> int:
        return self.q.size

    def __getitem__(self, g):
        return self.q[g]


def uniform_weights(m: int) -> GroupWeights:
    if m < 1:
        raise InvalidArgument("m must be >= 1")
    return GroupWeights(np.full(m, 1.0 / m))


def group_fractions(dataset: GroupedDataset) -> np.ndarray:
    """Empirical group frequencies n_g / n."""
    return dataset.group_sizes / dataset.n


def stratified_split(dataset: GroupedDataset, fractions, seed: int):
    """Split every group independently into (train, val, test).

    Train and val sizes are floored, test receives the remainder. Raises
    :class:`SplitInfeasible` if any group cannot give one example to each part.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise InvalidArgument("expected three fractions (train, val, test)")
    if any(not f > 0 for f in fractions):
        raise InvalidArgument(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgument(f"fractions sum to {sum(fractions)}, not 1")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for gid, pos in enumerate(dataset.group_index):
        n_g = pos.size
        n_tr = math.floor(fractions[0] * n_g + 1e-9)
        n_va = math.floor(fractions[1] * n_g + 1e-9)
        n_te = n_g - n_tr - n_va
        if min(n_tr, n_va, n_te) < 1:
            raise SplitInfeasible(gid, n_g, 3)
        perm = rng.permutation(pos)
        parts[0].append(perm[:n_tr])
        parts[1].append(perm[n_tr:n_tr + n_va])
        parts[2].append(perm[n_tr + n_va:])
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)
