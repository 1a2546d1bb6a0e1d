""" An incremental nearest-neighbour index over C-space points.

`scipy.spatial.cKDTree` is static, so the index keeps a k-d tree over a
prefix of the points and scans the unindexed tail linearly. The tree is
rebuilt once the tail grows past a quarter of the indexed prefix.
"""

from __future__ import annotations

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from flowplan.utils import FloatArray

MIN_REBUILD = 256
CANDIDATES = 4


class SpatialIndex:
    """Append-only point set with exact nearest / radius queries.

    `nearest` breaks distance ties by the lowest index, which makes the
    answers identical to a linear scan over the points.
    """

    def __init__(self, dim: int, capacity: int = 1024):
        self.dim = dim
        self._points = np.empty((max(capacity, 1), dim))
        self._size = 0
        self._tree: cKDTree | None = None
        self._indexed = 0

    def __len__(self) -> int:
        return self._size

    @property
    def points(self) -> FloatArray:
        """Read-only view of the stored points, in insertion order."""
        view = self._points[: self._size]
        view.flags.writeable = False
        return view

    def add(self, q: FloatArray) -> int:
        if np.shape(q) != (self.dim,):
            raise ValueError(
                f"Expected a {self.dim}-dimensional point, got {np.shape(q)}"
            )
        if self._size == len(self._points):
            grown = np.empty((2 * len(self._points), self.dim))
            grown[: self._size] = self._points[: self._size]
            self._points = grown
        self._points[self._size] = q
        self._size += 1
        if self._size - self._indexed >= max(MIN_REBUILD, self._indexed // 4):
            self._tree = cKDTree(self._points[: self._size].copy())
            self._indexed = self._size
        return self._size - 1

    def _candidates(self, q: FloatArray) -> npt.NDArray[np.int64]:
        tail = np.arange(self._indexed, self._size)
        if self._tree is None:
            return tail
        k = min(CANDIDATES, self._indexed)
        dist, idx = self._tree.query(q, k=k)
        idx = np.atleast_1d(idx)
        dist = np.atleast_1d(dist)
        # Every indexed point as close as the k-th candidate is a potential
        # tie, so widen the search to the closed ball around q.
        ball = self._tree.query_ball_point(q, dist[-1] * (1 + 1e-12) + 1e-300)
        return np.concatenate([idx, np.asarray(ball, dtype=np.int64), tail])

    def nearest(self, q: FloatArray) -> int:
        """Index of the stored point closest to q (Euclidean)."""
        if self._size == 0:
            raise ValueError("nearest() on an empty index")
        candidates = np.unique(self._candidates(np.asarray(q, dtype=np.float64)))
        d2 = ((self._points[candidates] - q) ** 2).sum(axis=1)
        best = d2.min()
        return int(candidates[d2 == best].min())

    def within(self, q: FloatArray, radius: float) -> list[int]:
        """Indices of the stored points at distance <= radius from q, ascending."""
        q = np.asarray(q, dtype=np.float64)
        found: list[int] = []
        if self._tree is not None:
            found.extend(self._tree.query_ball_point(q, radius))
        tail = self._points[self._indexed : self._size]
        close = np.flatnonzero(((tail - q) ** 2).sum(axis=1) <= radius * radius)
        found.extend((close + self._indexed).tolist())
        return sorted(int(i) for i in found)
