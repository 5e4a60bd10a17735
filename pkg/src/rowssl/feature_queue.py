"""FIFO memory of key embeddings with optional class labels.

The queue stores unit-norm vectors from the momentum key network together
with the class label for labeled samples (-1 marks unlabeled). Once full,
each push evicts the oldest entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNLABELED = -1


@dataclass(frozen=True)
class QueueSnapshot:
    """Read-only copy of queue contents, oldest entry first."""

    embeddings: np.ndarray  # (m, dim)
    labels: np.ndarray      # (m,) int64, -1 for unlabeled

    def __len__(self) -> int:
        return self.embeddings.shape[0]


class FeatureQueue:
    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._embs = np.zeros((capacity, dim))
        self._labels = np.full(capacity, UNLABELED, dtype=np.int64)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def is_full(self) -> bool:
        return self._size == self.capacity

    def push_batch(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        """Append rows in order, evicting the oldest entries when full.

        Every embedding must already be unit-norm (within 1e-6); labels are
        class ids for labeled samples and -1 otherwise.
        """
        embs = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        labs = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if embs.shape[0] != labs.shape[0]:
            raise ValueError("embeddings and labels disagree on batch size")
        if embs.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {embs.shape[1]}")
        norms = np.linalg.norm(embs, axis=1)
        off = np.abs(norms - 1.0)
        if off.size and off.max() > 1e-6:
            raise ValueError(f"embeddings must be unit-norm (max |norm-1| = {off.max():.3g})")
        m = embs.shape[0]
        if m >= self.capacity:
            # Only the newest `capacity` rows survive.
            self._embs[...] = embs[m - self.capacity :]
            self._labels[...] = labs[m - self.capacity :]
            self._cursor = 0
            self._size = self.capacity
            return
        pos = (self._cursor + np.arange(m)) % self.capacity
        self._embs[pos] = embs
        self._labels[pos] = labs
        self._cursor = int((self._cursor + m) % self.capacity)
        self._size = min(self._size + m, self.capacity)

    def snapshot(self) -> QueueSnapshot:
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (self._cursor + np.arange(self.capacity)) % self.capacity
        return QueueSnapshot(self._embs[order].copy(), self._labels[order].copy())
