import numpy as np
import pytest

from ltcl.errors import ContractError
from ltcl.memqueue import MemoryQueue, Snapshot, positives_of


def unit_rows(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_fifo_law_capacity_four():
    q = MemoryQueue(capacity=4, dim=3)
    vecs = np.eye(3)[[0, 1, 2, 0, 1]].astype(float)  # a, b, c, d, e stand-ins
    for i in range(5):
        q.enqueue_batch(vecs[i:i + 1], [i + 1])
    snap = q.snapshot()
    assert list(snap.labels) == [2, 3, 4, 5]
    assert np.array_equal(snap.embeddings[0], vecs[1])


def test_enqueue_empty_batch_is_identity():
    q = MemoryQueue(capacity=4, dim=2)
    q.enqueue_batch(np.array([[1.0, 0.0]]), [1])
    q.enqueue_batch(np.zeros((0, 2)), [])
    assert len(q) == 1


def test_non_unit_norm_rejected():
    q = MemoryQueue(capacity=4, dim=2)
    with pytest.raises(ContractError):
        q.enqueue_batch(np.array([[2.0, 0.0]]), [1])


def test_positives_of_filter_semantics():
    q = MemoryQueue(capacity=8, dim=2)
    q.enqueue_batch(np.array([[1.0, 0], [0, 1.0], [1.0, 0], [0, 1.0]]), [1, 2, 1, 3])
    snap = q.snapshot()
    assert list(snap.positives_of(1)) == [0, 2]
    assert list(snap.positives_of(9)) == []
    assert list(positives_of(q, 1)) == [0, 2]


def test_positive_negative_partition():
    q = MemoryQueue(capacity=16, dim=4)
    q.enqueue_batch(unit_rows(10), np.arange(10) % 3 + 1)
    snap = q.snapshot()
    for label in (1, 2, 3, 7):
        pos = set(snap.positives_of(label).tolist())
        neg = set(snap.negatives_of(label).tolist())
        assert pos | neg == set(range(len(snap)))
        assert not (pos & neg)


def test_snapshot_immutable_after_enqueue():
    q = MemoryQueue(capacity=4, dim=2)
    q.enqueue_batch(np.array([[1.0, 0.0]]), [1])
    snap = q.snapshot()
    q.enqueue_batch(np.array([[0.0, 1.0]]), [2])
    assert len(snap) == 1
    assert list(snap.labels) == [1]
    with pytest.raises(ValueError):
        snap.embeddings[0, 0] = 5.0


def test_snapshot_of_empty_queue_has_zero_rows():
    snap = MemoryQueue(capacity=4, dim=3).snapshot()
    assert snap.embeddings.shape == (0, 3)
    assert len(snap) == 0


def test_snapshot_rows_equal_entries_exactly():
    q = MemoryQueue(capacity=8, dim=5)
    rows = unit_rows(6, d=5, seed=3)
    q.enqueue_batch(rows, np.arange(6))
    snap = q.snapshot()
    assert np.array_equal(snap.embeddings, rows)


def test_fifo_multiset_matches_last_capacity_insertions():
    rng = np.random.default_rng(4)
    cap = 16
    q = MemoryQueue(capacity=cap, dim=3)
    all_labels = []
    next_label = 0
    for _ in range(30):
        n = int(rng.integers(1, 7))
        labels = list(range(next_label, next_label + n))
        next_label += n
        q.enqueue_batch(unit_rows(n, d=3, seed=next_label), labels)
        all_labels.extend(labels)
    snap = q.snapshot()
    assert list(snap.labels) == all_labels[-cap:]


def test_oversized_batch_keeps_newest():
    q = MemoryQueue(capacity=4, dim=3)
    rows = unit_rows(7, d=3, seed=9)
    q.enqueue_batch(rows, np.arange(7))
    snap = q.snapshot()
    assert list(snap.labels) == [3, 4, 5, 6]


def test_entries_are_detached_copies():
    q = MemoryQueue(capacity=4, dim=2)
    src = np.array([[1.0, 0.0]])
    q.enqueue_batch(src, [1])
    src[0, 0] = -1.0
    assert q.snapshot().embeddings[0, 0] == 1.0


def _simulate_epoch_fractions(class_counts, capacity, seed):
    """Enqueue a uniformly shuffled epoch; average per-class snapshot counts."""
    labels = np.concatenate([
        np.full(c, k + 1, dtype=np.int64) for k, c in enumerate(class_counts)
    ])
    rng = np.random.default_rng(seed)
    d = 3
    q = MemoryQueue(capacity=capacity, dim=d)
    batch = 64

    def run_epoch(collect):
        order = rng.permutation(labels.shape[0])
        sums = np.zeros(len(class_counts))
        snaps = 0
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            vecs = rng.normal(size=(len(idx), d))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            q.enqueue_batch(vecs, labels[idx])
            if collect and len(q) == capacity:
                snap = q.snapshot()
                for k in range(len(class_counts)):
                    sums[k] += (snap.labels == k + 1).sum()
                snaps += 1
        return sums, snaps

    run_epoch(collect=False)  # fill
    sums, snaps = run_epoch(collect=True)
    return sums / snaps


def test_epoch_averaged_class_fractions_match_cardinalities():
    class_counts = (500, 393, 308, 242, 190)
    capacity = 1024
    n = sum(class_counts)
    mean_counts = _simulate_epoch_fractions(class_counts, capacity, seed=11)
    for k, ck in enumerate(class_counts):
        expected = ck / n * capacity
        sigma = np.sqrt(capacity * (ck / n) * (1 - ck / n))
        assert abs(mean_counts[k] - expected) <= 3 * sigma


def test_head_class_positive_set_size_within_ten_percent():
    class_counts = (500, 393, 308, 242, 190, 149, 117, 92, 72, 57)
    capacity = 2048
    n = sum(class_counts)
    mean_counts = _simulate_epoch_fractions(class_counts, capacity, seed=13)
    for k in range(3):  # head classes
        expected = class_counts[k] / n * capacity
        assert abs(mean_counts[k] - expected) <= 0.1 * expected
