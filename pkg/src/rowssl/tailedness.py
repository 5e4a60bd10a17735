"""Tailedness estimation: prototype densities and per-class score dispersion.

A bank of unit-norm prototypes summarizes the key-embedding queue. Each
prototype gets a density from its K nearest queue entries (rank-weighted mean
cosine similarity); a sample's tailedness score is the density of its nearest
prototype. High density means a head-region sample, low density a tail-region
one. Per-class FIFO queues of recent scores yield a dispersion value per
class that downstream losses use as class uncertainty.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .feature_queue import QueueSnapshot
from .numerics import kmeans, l2_normalize_rows


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (m, dim) unit-norm rows
    densities: np.ndarray   # (m,) in [-1, 1]
    densities_valid: bool = False


def init_prototypes(snapshot: QueueSnapshot, n_prototypes: int, seed: int) -> PrototypeBank:
    """Seed the bank by k-means over the queue; densities still need a refresh."""
    if n_prototypes < 1:
        raise ValueError("n_prototypes must be >= 1")
    if len(snapshot) < n_prototypes:
        raise StateError(
            f"queue holds {len(snapshot)} entries, need >= {n_prototypes} to seed prototypes"
        )
    centroids, _, _ = kmeans(snapshot.embeddings, n_prototypes, seed)
    return PrototypeBank(
        prototypes=l2_normalize_rows(centroids),
        densities=np.zeros(n_prototypes),
        densities_valid=False,
    )


def knn_density(bank: PrototypeBank, snapshot: QueueSnapshot, k: int) -> np.ndarray:
    """Recompute per-prototype densities from the current queue.

    The density of prototype j is a weighted mean of its k highest cosine
    similarities to queue entries, with linearly decaying weights k..1 in
    decreasing-similarity order (ties keep the older entry first). Values are
    clipped into [-1, 1] before weighting, so densities live in [-1, 1].
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(snapshot) < k:
        raise ValueError(f"queue holds {len(snapshot)} entries, need >= {k}")
    sims = np.clip(bank.prototypes @ snapshot.embeddings.T, -1.0, 1.0)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    weights = np.arange(k, 0, -1, dtype=np.float64)
    bank.densities = top @ weights / weights.sum()
    bank.densities_valid = True
    return bank.densities


def tailedness_scores(keys: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Score each key with the density of its nearest prototype (cosine argmax)."""
    if not bank.densities_valid:
        raise StateError("densities are stale; call knn_density after any bank/queue change")
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    nearest = np.argmax(keys @ bank.prototypes.T, axis=1)  # ties -> lowest index
    return bank.densities[nearest]


def update_prototypes(bank: PrototypeBank, snapshot: QueueSnapshot, lambda_tail: float) -> None:
    """Blend each prototype toward the mean of its assigned queue entries.

    m_j <- normalize(lambda_tail * m_j + (1 - lambda_tail) * mean(U_j)) where
    U_j are queue entries whose nearest prototype is j; an empty U_j leaves
    m_j unchanged. Densities are marked stale and must be recomputed.
    """
    if not 0.0 <= lambda_tail <= 1.0:
        raise ValueError("lambda_tail must be in [0, 1]")
    if len(snapshot) == 0:
        raise StateError("cannot update prototypes from an empty queue")
    nearest = np.argmax(snapshot.embeddings @ bank.prototypes.T, axis=1)
    for j in range(bank.prototypes.shape[0]):
        members = snapshot.embeddings[nearest == j]
        if members.shape[0] == 0:
            continue
        blended = lambda_tail * bank.prototypes[j] + (1.0 - lambda_tail) * members.mean(axis=0)
        norm = np.linalg.norm(blended)
        if norm > 0.0:
            bank.prototypes[j] = blended / norm
        # A zero blend (antipodal cancellation) leaves the prototype as-is.
    bank.densities_valid = False


class ClassTailQueues:
    """Bounded FIFO of recent tailedness scores per class."""

    def __init__(self, n_classes: int, cap: int = 256):
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.n_classes = int(n_classes)
        self.cap = int(cap)
        self._queues: list[deque[float]] = [deque(maxlen=cap) for _ in range(n_classes)]

    def push(self, scores: np.ndarray, labels: np.ndarray) -> None:
        """Append scores to their class queues in batch order."""
        scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if scores.shape != labels.shape:
            raise ValueError("scores and labels disagree on batch size")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        for s, c in zip(scores, labels):
            self._queues[c].append(float(s))

    def sizes(self) -> list[int]:
        return [len(q) for q in self._queues]

    def uncertainty(self) -> np.ndarray:
        """Population standard deviation of each class queue (0 below 2 entries)."""
        out = np.zeros(self.n_classes)
        for c, q in enumerate(self._queues):
            if len(q) >= 2:
                out[c] = float(np.std(np.fromiter(q, dtype=np.float64)))
        return out
