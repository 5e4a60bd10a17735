import numpy as np
import pytest

from gradcheck import finite_difference_gradient, max_rel_err
from rowssl.errors import StateError
from rowssl.feature_queue import QueueSnapshot
from rowssl.losses import (
    classifier_loss,
    dynamic_temperature,
    dynamic_temperatures,
    info_nce,
    info_nce_batch,
    representation_loss,
    soft_pseudo_label,
    sup_con,
    sup_con_batch,
    total_loss,
)
from rowssl.numerics import softmax_temp


def _unit_rows(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _snap(n, dim, n_classes=4, seed=0):
    rng = np.random.default_rng(seed)
    embs = _unit_rows(n, dim, seed=seed + 1)
    labels = rng.integers(0, n_classes, size=n).astype(np.int64)
    return QueueSnapshot(embs, labels)


# ---------------------------------------------------------------- temperatures


def test_dynamic_temperature_endpoints_exact():
    densities = np.array([0.2, 0.5, 0.9])
    assert dynamic_temperature(0.2, densities, 0.05, 1.0) == 0.05
    assert dynamic_temperature(0.9, densities, 0.05, 1.0) == 1.0


def test_dynamic_temperature_linear_midpoint():
    densities = np.array([0.0, 1.0])
    assert abs(dynamic_temperature(0.5, densities, 0.05, 1.0) - 0.525) < 1e-12


def test_dynamic_temperatures_clamped_outside_range():
    densities = np.array([0.0, 1.0])
    taus = dynamic_temperatures(np.array([-5.0, 5.0]), densities, 0.05, 1.0)
    assert taus.tolist() == [0.05, 1.0]


def test_dynamic_temperatures_monotone():
    rng = np.random.default_rng(3)
    densities = rng.uniform(-1.0, 1.0, size=50)
    scores = np.sort(rng.uniform(-1.2, 1.2, size=200))
    taus = dynamic_temperatures(scores, densities, 0.05, 1.0)
    assert np.all(np.diff(taus) >= 0.0)
    assert np.all(taus >= 0.05) and np.all(taus <= 1.0)


def test_dynamic_temperatures_degenerate_range_gives_midpoint():
    densities = np.full(8, 0.37)
    taus = dynamic_temperatures(np.array([0.1, 0.37, 0.9]), densities, 0.05, 1.0)
    assert np.allclose(taus, 0.525, atol=1e-15)


def test_dynamic_temperatures_validate_inputs():
    with pytest.raises(ValueError):
        dynamic_temperatures(np.array([0.5]), np.array([0.0, 1.0]), 0.0, 1.0)
    with pytest.raises(ValueError):
        dynamic_temperatures(np.array([0.5]), np.array([0.0, 1.0]), 0.5, 0.1)
    with pytest.raises(ValueError):
        dynamic_temperatures(np.array([0.5]), np.array([]), 0.05, 1.0)


# -------------------------------------------------------------------- info_nce


def test_info_nce_orthogonal_queue_oracle():
    # Anchor == positive == e1; one orthogonal negative; tau = 1.
    # loss = log(e^1 + e^0) - 1 = log(1 + e^-1) = 0.31326168751822286.
    anchor = np.array([1.0, 0.0])
    queue = np.array([[0.0, 1.0]])
    loss, grad = info_nce(anchor, anchor.copy(), queue, 1.0)
    assert abs(loss - 0.31326168751822286) < 1e-15
    assert grad.shape == (2,)


def test_info_nce_empty_queue_raises_state_error():
    with pytest.raises(StateError):
        info_nce(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.zeros((0, 2)), 0.1)


def test_info_nce_rejects_nonpositive_temperature():
    q = np.array([[0.0, 1.0]])
    with pytest.raises(ValueError):
        info_nce(np.array([1.0, 0.0]), np.array([1.0, 0.0]), q, 0.0)


def test_info_nce_loss_positive_and_small_when_positive_dominates():
    # With the positive far more similar than every negative, the loss is
    # small but strictly positive (the denominator always includes negatives).
    anchor = np.array([1.0, 0.0])
    queue = np.tile(np.array([[-1.0, 0.0]]), (5, 1))
    loss, _ = info_nce(anchor, anchor.copy(), queue, 0.1)
    assert 0.0 < loss < 1e-7


def test_info_nce_batch_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for trial in range(5):
        n, d, m = 3, 5, 8
        anchors = rng.standard_normal((n, d))
        positives = _unit_rows(n, d, seed=20 + trial)
        queue = _unit_rows(m, d, seed=40 + trial)
        taus = rng.uniform(0.1, 1.0, size=n)

        def f():
            losses, _ = info_nce_batch(anchors, positives, queue, taus)
            return float(losses.sum())

        _, grads = info_nce_batch(anchors, positives, queue, taus)
        (num,) = finite_difference_gradient(f, [anchors])
        assert max_rel_err([grads], [num]) < 1e-5


# --------------------------------------------------------------------- sup_con


def test_sup_con_single_positive_oracle():
    # Queue of two entries: one shares the label (cosine 1), one does not
    # (cosine 0). With tau = 1 the loss is the same two-way softmax as the
    # InfoNCE oracle: log(1 + e^-1).
    anchor = np.array([1.0, 0.0])
    queue = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, grad, skipped = sup_con(anchor, 2, queue, np.array([2, 0]), 1.0)
    assert not skipped
    assert abs(loss - 0.31326168751822286) < 1e-15


def test_sup_con_skips_anchor_without_positives():
    anchor = np.array([1.0, 0.0])
    queue = np.array([[0.0, 1.0]])
    loss, grad, skipped = sup_con(anchor, 3, queue, np.array([1]), 0.1)
    assert skipped
    assert loss == 0.0
    assert np.array_equal(grad, np.zeros(2))


def test_sup_con_empty_queue_skips_everything():
    losses, grads, skipped = sup_con_batch(
        _unit_rows(4, 3), np.arange(4), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), 0.1
    )
    assert np.all(skipped)
    assert np.all(losses == 0.0) and np.all(grads == 0.0)


def test_sup_con_rejects_unlabeled_anchor_and_bad_tau():
    queue = _unit_rows(3, 2)
    with pytest.raises(ValueError):
        sup_con(np.array([1.0, 0.0]), -1, queue, np.zeros(3, dtype=np.int64), 0.1)
    with pytest.raises(ValueError):
        sup_con(np.array([1.0, 0.0]), 0, queue, np.zeros(3, dtype=np.int64), -0.1)


def test_sup_con_batch_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    for trial in range(5):
        n, d, m = 4, 5, 10
        anchors = rng.standard_normal((n, d))
        labels = rng.integers(0, 3, size=n).astype(np.int64)
        queue = _unit_rows(m, d, seed=60 + trial)
        queue_labels = rng.integers(0, 3, size=m).astype(np.int64)

        def f():
            losses, _, _ = sup_con_batch(anchors, labels, queue, queue_labels, 0.3)
            return float(losses.sum())

        _, grads, _ = sup_con_batch(anchors, labels, queue, queue_labels, 0.3)
        (num,) = finite_difference_gradient(f, [anchors])
        assert max_rel_err([grads], [num]) < 1e-5


# --------------------------------------------------------- representation loss


def test_representation_loss_mixing_identity_exact():
    rng = np.random.default_rng(11)
    snap = _snap(12, 4, seed=2)
    anchors = _unit_rows(6, 4, seed=3)
    positives = _unit_rows(6, 4, seed=4)
    labels = rng.integers(0, 4, size=6).astype(np.int64)
    is_labeled = np.array([True, True, False, False, True, False])
    taus = rng.uniform(0.1, 0.9, size=6)
    res = representation_loss(anchors, positives, labels, is_labeled, snap, taus, 0.35, 0.07)
    assert res.value == (1.0 - 0.35) * res.unsup_mean + 0.35 * res.sup_mean


def test_representation_loss_lambda_extremes():
    rng = np.random.default_rng(13)
    snap = _snap(10, 3, seed=5)
    anchors = _unit_rows(4, 3, seed=6)
    positives = _unit_rows(4, 3, seed=7)
    labels = rng.integers(0, 4, size=4).astype(np.int64)
    is_labeled = np.array([True, False, True, False])
    taus = np.full(4, 0.2)
    pure_unsup = representation_loss(
        anchors, positives, labels, is_labeled, snap, taus, 0.0, 0.07
    )
    assert pure_unsup.value == pure_unsup.unsup_mean
    pure_sup = representation_loss(
        anchors, positives, labels, is_labeled, snap, taus, 1.0, 0.07
    )
    assert pure_sup.value == pure_sup.sup_mean


def test_representation_loss_skip_unsup_zeroes_the_infonce_term():
    rng = np.random.default_rng(15)
    snap = _snap(8, 3, seed=8)
    anchors = _unit_rows(3, 3, seed=9)
    positives = _unit_rows(3, 3, seed=10)
    labels = rng.integers(0, 4, size=3).astype(np.int64)
    is_labeled = np.array([True, False, False])
    res = representation_loss(
        anchors, positives, labels, is_labeled, snap, np.full(3, 0.3), 0.35, 0.07,
        skip_unsup=True,
    )
    assert res.unsup_mean == 0.0
    assert res.value == 0.35 * res.sup_mean
    # Unlabeled anchors then carry no gradient at all.
    assert np.all(res.grad_anchors[~is_labeled] == 0.0)


def test_representation_loss_unlabeled_batch_has_zero_sup_term():
    snap = _snap(8, 3, seed=12)
    anchors = _unit_rows(3, 3, seed=13)
    positives = _unit_rows(3, 3, seed=14)
    res = representation_loss(
        anchors, positives, np.full(3, -1), np.zeros(3, dtype=bool), snap,
        np.full(3, 0.3), 0.35, 0.07,
    )
    assert res.sup_mean == 0.0
    assert res.value == 0.65 * res.unsup_mean


def test_representation_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    snap = _snap(10, 4, n_classes=3, seed=16)
    for trial in range(3):
        anchors = rng.standard_normal((5, 4))
        positives = _unit_rows(5, 4, seed=80 + trial)
        labels = rng.integers(0, 3, size=5).astype(np.int64)
        is_labeled = rng.uniform(size=5) < 0.6
        taus = rng.uniform(0.1, 0.8, size=5)

        def f():
            return representation_loss(
                anchors, positives, labels, is_labeled, snap, taus, 0.35, 0.07
            ).value

        res = representation_loss(anchors, positives, labels, is_labeled, snap, taus, 0.35, 0.07)
        (num,) = finite_difference_gradient(f, [anchors])
        assert max_rel_err([res.grad_anchors], [num]) < 1e-5


def test_representation_loss_validates_lambda():
    snap = _snap(4, 2, seed=19)
    with pytest.raises(ValueError):
        representation_loss(
            _unit_rows(2, 2), _unit_rows(2, 2), np.zeros(2, dtype=np.int64),
            np.zeros(2, dtype=bool), snap, np.full(2, 0.2), 1.5, 0.07,
        )


# ----------------------------------------------------------- soft pseudo-label


def test_soft_pseudo_label_zero_uncertainty_is_plain_softmax():
    rng = np.random.default_rng(21)
    logits = rng.standard_normal((4, 5))
    q = soft_pseudo_label(logits, np.zeros(5), 1.0, 0.07)
    assert np.allclose(q, softmax_temp(logits, 0.07), atol=1e-15)


def test_soft_pseudo_label_uncertainty_boosts_class():
    logits = np.zeros((1, 3))
    u = np.array([0.0, 0.5, 0.0])
    q = soft_pseudo_label(logits, u, 1.0, 0.5)
    assert q[0, 1] > q[0, 0]
    assert abs(q[0, 0] - q[0, 2]) < 1e-15
    # lambda_var = 0 switches the bias off.
    q0 = soft_pseudo_label(logits, u, 0.0, 0.5)
    assert np.allclose(q0, 1.0 / 3.0, atol=1e-15)


def test_soft_pseudo_label_validates_lengths():
    with pytest.raises(ValueError):
        soft_pseudo_label(np.zeros((2, 3)), np.zeros(4), 1.0, 0.07)


# ------------------------------------------------------------- classifier loss


def test_classifier_loss_uniform_everything_oracle():
    # Uniform targets and uniform probabilities over C classes:
    # ce_mean = log C, entropy = log C, value = (1 - eps) * log C.
    c = 4
    p = np.full((3, c), 1.0 / c)
    t = np.full((3, c), 1.0 / c)
    res = classifier_loss(p, p.copy(), t, t.copy(), 4.0)
    log_c = np.log(c)
    assert abs(res.ce_mean - log_c) < 1e-12
    assert abs(res.entropy - log_c) < 1e-12
    assert abs(res.value - (1.0 - 4.0) * log_c) < 1e-12


def test_classifier_loss_entropy_term_rewards_spread():
    # Two one-hot-ish posteriors on different classes give higher mean-entropy
    # (so lower loss) than both collapsing onto the same class.
    t = np.full((2, 2), 0.5)
    sharp_same = np.array([[0.99, 0.01], [0.99, 0.01]])
    sharp_split = np.array([[0.99, 0.01], [0.01, 0.99]])
    same = classifier_loss(sharp_same, sharp_same.copy(), t, t.copy(), 4.0)
    split = classifier_loss(sharp_split, sharp_split.copy(), t, t.copy(), 4.0)
    assert split.entropy > same.entropy
    assert split.value < same.value


def test_classifier_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(23)
    for trial in range(3):
        n, c = 4, 5
        p1 = softmax_temp(rng.standard_normal((n, c)), 1.0)
        p2 = softmax_temp(rng.standard_normal((n, c)), 1.0)
        t1 = softmax_temp(rng.standard_normal((n, c)), 1.0)
        t2 = softmax_temp(rng.standard_normal((n, c)), 1.0)

        def f():
            return classifier_loss(p1, p2, t1, t2, 4.0).value

        res = classifier_loss(p1, p2, t1, t2, 4.0)
        num = finite_difference_gradient(f, [p1, p2])
        assert max_rel_err([res.grad_p1, res.grad_p2], num) < 1e-5


def test_classifier_loss_validates_targets_and_probabilities():
    p = np.full((2, 3), 1.0 / 3.0)
    good_t = np.full((2, 3), 1.0 / 3.0)
    bad_sum = good_t * 1.1
    with pytest.raises(ValueError):
        classifier_loss(p, p, bad_sum, good_t, 4.0)
    neg = np.array([[1.2, -0.1, -0.1], [1.2, -0.1, -0.1]])
    with pytest.raises(ValueError):
        classifier_loss(p, p, good_t, neg, 4.0)
    zero_p = p.copy()
    zero_p[0, 0] = 0.0
    with pytest.raises(ValueError):
        classifier_loss(zero_p, p, good_t, good_t, 4.0)
    with pytest.raises(ValueError):
        classifier_loss(p, p[:1], good_t, good_t, 4.0)


# ----------------------------------------------------------------- total loss


def test_total_loss_identities_exact():
    rng = np.random.default_rng(25)
    snap = _snap(10, 4, seed=26)
    anchors = _unit_rows(5, 4, seed=27)
    positives = _unit_rows(5, 4, seed=28)
    labels = rng.integers(0, 4, size=5).astype(np.int64)
    is_labeled = rng.uniform(size=5) < 0.5
    rep = representation_loss(
        anchors, positives, labels, is_labeled, snap, np.full(5, 0.2), 0.35, 0.07
    )
    p1 = softmax_temp(rng.standard_normal((5, 4)), 1.0)
    p2 = softmax_temp(rng.standard_normal((5, 4)), 1.0)
    t = np.full((5, 4), 0.25)
    cls = classifier_loss(p1, p2, t, t.copy(), 4.0)
    bd = total_loss(rep, cls)
    assert bd.rep == (1.0 - 0.35) * bd.unsup + 0.35 * bd.sup
    assert bd.cls == bd.ce - 4.0 * bd.entropy or abs(bd.cls - (bd.ce - 4.0 * bd.entropy)) < 1e-12
    assert bd.total == bd.rep + bd.cls
