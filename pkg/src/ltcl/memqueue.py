"""Labeled FIFO memory of detached embeddings.

The queue stores unit-norm embedding rows with class labels in strict
insertion order; once capacity is reached the oldest rows are evicted.
Losses never read the live buffers: they work against an immutable
Snapshot, so later enqueues cannot mutate an in-flight computation, and
the stored rows are plain float64 copies with no autodiff history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Snapshot:
    """Frozen view of queue contents, oldest first."""

    embeddings: np.ndarray  # (m, d)
    labels: np.ndarray  # (m,)

    def __post_init__(self):
        self.embeddings.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def positives_of(self, label: int) -> np.ndarray:
        """Indices of entries whose label equals the query."""
        return np.nonzero(self.labels == label)[0]

    def negatives_of(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels != label)[0]


class MemoryQueue:
    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContractError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim))
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._next = 0  # ring write position
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def fill_fraction(self) -> float:
        return self._count / self.capacity

    def enqueue_batch(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        emb = np.asarray(embeddings, dtype=np.float64)
        lab = np.asarray(labels, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[0] != lab.shape[0]:
            raise ContractError(
                f"embeddings {emb.shape} and labels {lab.shape} do not align"
            )
        if emb.shape[0] == 0:
            return
        if emb.shape[1] != self.dim:
            raise ContractError(f"expected dim {self.dim}, got {emb.shape[1]}")
        norms = np.linalg.norm(emb, axis=1)
        if np.abs(norms - 1.0).max() > _UNIT_NORM_TOL:
            raise ContractError(
                f"non-unit-norm embedding (max deviation {np.abs(norms - 1).max():.3e})"
            )
        if emb.shape[0] > self.capacity:  # only the newest rows can survive
            emb = emb[-self.capacity:]
            lab = lab[-self.capacity:]
        n = emb.shape[0]
        first = min(n, self.capacity - self._next)
        self._buf[self._next:self._next + first] = emb[:first]
        self._labels[self._next:self._next + first] = lab[:first]
        rest = n - first
        if rest:
            self._buf[:rest] = emb[first:]
            self._labels[:rest] = lab[first:]
        self._next = (self._next + n) % self.capacity
        self._count = min(self.capacity, self._count + n)

    def snapshot(self) -> Snapshot:
        if self._count < self.capacity:
            emb = self._buf[: self._count].copy()
            lab = self._labels[: self._count].copy()
        else:
            order = np.concatenate([np.arange(self._next, self.capacity),
                                    np.arange(self._next)])
            emb = self._buf[order].copy()
            lab = self._labels[order].copy()
        return Snapshot(embeddings=emb, labels=lab)


def positives_of(queue_or_snapshot, label: int) -> np.ndarray:
    """Indices of same-label entries; complement is the negative set."""
    snap = (queue_or_snapshot.snapshot()
            if isinstance(queue_or_snapshot, MemoryQueue) else queue_or_snapshot)
    return snap.positives_of(label)
