import numpy as np
import pytest

from rowssl.errors import StateError
from rowssl.feature_queue import QueueSnapshot
from rowssl.tailedness import (
    ClassTailQueues,
    PrototypeBank,
    init_prototypes,
    knn_density,
    tailedness_scores,
    update_prototypes,
)


def _snap(rows, labels=None):
    rows = np.asarray(rows, dtype=np.float64)
    if labels is None:
        labels = np.full(rows.shape[0], -1, dtype=np.int64)
    return QueueSnapshot(rows, np.asarray(labels, dtype=np.int64))


def _unit_rows(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def test_knn_density_hand_example():
    # One prototype at e1; two queue entries with cosines 1.0 and 0.5.
    # Weighted mean with weights (2, 1): (2*1.0 + 1*0.5) / 3 = 5/6.
    bank = PrototypeBank(np.array([[1.0, 0.0]]), np.zeros(1))
    snap = _snap([[1.0, 0.0], [0.5, np.sqrt(0.75)]])
    d = knn_density(bank, snap, k=2)
    assert abs(d[0] - 5.0 / 6.0) < 1e-12
    assert bank.densities_valid


def test_knn_density_identical_neighbors_gives_one():
    bank = PrototypeBank(np.array([[0.0, 1.0]]), np.zeros(1))
    snap = _snap([[0.0, 1.0]] * 5)
    d = knn_density(bank, snap, k=5)
    assert abs(d[0] - 1.0) < 1e-12


def test_knn_density_bounded_in_minus_one_one():
    rng = np.random.default_rng(1)
    for trial in range(20):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(6, 30))
        k = int(rng.integers(1, 6))
        bank = PrototypeBank(_unit_rows(m, 4, seed=trial), np.zeros(m))
        snap = _snap(_unit_rows(n, 4, seed=100 + trial))
        d = knn_density(bank, snap, k=k)
        assert np.all(d <= 1.0) and np.all(d >= -1.0)


def test_knn_density_prefers_older_entry_on_ties():
    # Two queue entries equally similar to the prototype; with k=1 the older
    # (earlier) one is taken — same value, but the sort must not be unstable.
    bank = PrototypeBank(np.array([[1.0, 0.0]]), np.zeros(1))
    snap = _snap([[np.sqrt(0.5), np.sqrt(0.5)], [np.sqrt(0.5), -np.sqrt(0.5)], [1.0, 0.0]])
    d = knn_density(bank, snap, k=3)
    assert abs(d[0] - (3 * 1.0 + 2 * np.sqrt(0.5) + 1 * np.sqrt(0.5)) / 6) < 1e-12


def test_knn_density_validates_k():
    bank = PrototypeBank(np.array([[1.0, 0.0]]), np.zeros(1))
    snap = _snap([[1.0, 0.0]])
    with pytest.raises(ValueError):
        knn_density(bank, snap, k=0)
    with pytest.raises(ValueError):
        knn_density(bank, snap, k=2)


def test_tailedness_scores_pick_nearest_prototype():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.9, 0.2]))
    bank.densities_valid = True
    keys = np.array([[0.95, 0.05], [0.1, 0.99]])
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    s = tailedness_scores(keys, bank)
    assert s.tolist() == [0.9, 0.2]


def test_tailedness_scores_tie_goes_to_lowest_index():
    bank = PrototypeBank(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0.7, 0.3]))
    bank.densities_valid = True
    s = tailedness_scores(np.array([[1.0, 0.0]]), bank)
    assert s[0] == 0.7


def test_tailedness_scores_require_fresh_densities():
    bank = PrototypeBank(np.array([[1.0, 0.0]]), np.zeros(1))
    with pytest.raises(StateError):
        tailedness_scores(np.array([[1.0, 0.0]]), bank)
    snap = _snap([[1.0, 0.0]])
    knn_density(bank, snap, k=1)
    tailedness_scores(np.array([[1.0, 0.0]]), bank)  # now fine
    update_prototypes(bank, snap, 0.9)
    with pytest.raises(StateError):
        tailedness_scores(np.array([[1.0, 0.0]]), bank)  # stale again


def test_init_prototypes_from_queue():
    rows = np.vstack([_unit_rows(20, 3, seed=0), _unit_rows(20, 3, seed=1)])
    bank = init_prototypes(_snap(rows), n_prototypes=4, seed=5)
    assert bank.prototypes.shape == (4, 3)
    norms = np.linalg.norm(bank.prototypes, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    assert not bank.densities_valid
    with pytest.raises(StateError):
        init_prototypes(_snap(rows[:3]), n_prototypes=4, seed=5)


def test_update_prototypes_hand_example():
    # Prototype (1, 0), all members at (0, 1), lambda 0.9:
    # blended = (0.9, 0.1); normalized = (0.9, 0.1)/sqrt(0.82).
    bank = PrototypeBank(np.array([[1.0, 0.0]]), np.zeros(1))
    snap = _snap([[0.0, 1.0], [0.0, 1.0]])
    update_prototypes(bank, snap, 0.9)
    want = np.array([0.9, 0.1]) / np.sqrt(0.82)
    assert np.allclose(bank.prototypes[0], want, atol=1e-12)


def test_update_prototypes_lambda_one_is_noop():
    protos = _unit_rows(3, 4, seed=2)
    bank = PrototypeBank(protos.copy(), np.zeros(3))
    update_prototypes(bank, _snap(_unit_rows(10, 4, seed=3)), 1.0)
    assert np.allclose(bank.prototypes, protos, atol=1e-15)


def test_update_prototypes_empty_cluster_unchanged():
    # Both queue entries sit nearest to prototype 0; prototype 1 keeps its value.
    bank = PrototypeBank(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2))
    before = bank.prototypes[1].copy()
    update_prototypes(bank, _snap([[1.0, 0.0], [0.9, np.sqrt(1 - 0.81)]]), 0.5)
    assert np.array_equal(bank.prototypes[1], before)


def test_update_prototypes_keeps_unit_norm_over_many_updates():
    rng = np.random.default_rng(4)
    bank = PrototypeBank(_unit_rows(4, 6, seed=5), np.zeros(4))
    for i in range(1000):
        snap = _snap(_unit_rows(int(rng.integers(8, 20)), 6, seed=1000 + i))
        update_prototypes(bank, snap, 0.9)
    norms = np.linalg.norm(bank.prototypes, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_class_tail_queues_std_and_minimum_size():
    queues = ClassTailQueues(n_classes=3, cap=8)
    assert queues.uncertainty().tolist() == [0.0, 0.0, 0.0]
    queues.push(np.array([0.5]), np.array([1]))
    # One entry -> still zero.
    assert queues.uncertainty()[1] == 0.0
    queues.push(np.array([0.0, 1.0]), np.array([0, 0]))
    u = queues.uncertainty()
    # Population std of {0, 1} is 0.5.
    assert abs(u[0] - 0.5) < 1e-15
    assert u[1] == 0.0 and u[2] == 0.0


def test_class_tail_queues_evict_oldest():
    queues = ClassTailQueues(n_classes=1, cap=3)
    queues.push(np.array([10.0, 0.0, 1.0, 2.0]), np.zeros(4, dtype=np.int64))
    # The 10.0 fell off; std of {0, 1, 2} = sqrt(2/3).
    assert abs(queues.uncertainty()[0] - np.sqrt(2.0 / 3.0)) < 1e-12
    assert queues.sizes() == [3]


def test_class_tail_queues_validate_labels():
    queues = ClassTailQueues(n_classes=2)
    with pytest.raises(ValueError):
        queues.push(np.array([0.1]), np.array([2]))
    with pytest.raises(ValueError):
        queues.push(np.array([0.1]), np.array([-1]))
    with pytest.raises(ValueError):
        queues.push(np.array([0.1, 0.2]), np.array([0]))
