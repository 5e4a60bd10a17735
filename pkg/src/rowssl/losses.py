"""Training losses and their closed-form gradients.

Two families combine into the step loss:

* representation: per-anchor InfoNCE against the queue with a dynamic
  (density-derived) temperature, plus a supervised contrastive term for
  labeled anchors over same-class queue entries, mixed by lambda_rep;
* classification: cross-entropy of temperature-scaled class posteriors
  against one-hot targets (labeled) or soft pseudo-labels (unlabeled),
  averaged over both views, minus an entropy bonus on the mean posterior
  that pushes head usage toward uniform.

All gradient formulas here are hand-derived; the suite checks them against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .feature_queue import QueueSnapshot
from .numerics import log_sum_exp, softmax_temp


def dynamic_temperature(score: float, densities: np.ndarray, tau_min: float, tau_max: float) -> float:
    """Map one tailedness score to a temperature (see dynamic_temperatures)."""
    return float(
        dynamic_temperatures(np.asarray([score]), densities, tau_min, tau_max)[0]
    )


def dynamic_temperatures(
    scores: np.ndarray, densities: np.ndarray, tau_min: float, tau_max: float
) -> np.ndarray:
    """Rescale scores linearly from the density range onto [tau_min, tau_max].

    The density minimum maps exactly to tau_min and the maximum exactly to
    tau_max; outputs are clamped into the interval. A degenerate density
    range (max - min < 1e-12) yields the midpoint for every anchor, so tail
    information only modulates temperatures when there is spread to read.
    """
    if not 0.0 < tau_min <= tau_max:
        raise ValueError(f"need 0 < tau_min <= tau_max, got ({tau_min}, {tau_max})")
    scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    densities = np.asarray(densities, dtype=np.float64)
    if densities.size == 0:
        raise ValueError("densities must be non-empty")
    lo = float(densities.min())
    hi = float(densities.max())
    if hi - lo < 1e-12:
        return np.full(scores.shape, 0.5 * (tau_min + tau_max))
    taus = tau_min + (scores - lo) / (hi - lo) * (tau_max - tau_min)
    taus = np.clip(taus, tau_min, tau_max)
    taus[scores <= lo] = tau_min
    taus[scores >= hi] = tau_max
    return taus


def info_nce_batch(
    anchors: np.ndarray,
    positives: np.ndarray,
    queue_embs: np.ndarray,
    taus: np.ndarray,
):
    """InfoNCE of each anchor against its positive key over {positive} + queue.

    loss_i = -log( exp(h_i.b_i/tau_i) / (exp(h_i.b_i/tau_i) + sum_q exp(h_i.q/tau_i)) )

    Positives and queue entries are constants (stop-gradient); the returned
    gradient is with respect to the anchors only:

    g_i = ((sigma_pos - 1) * b_i + sum_q sigma_q * q) / tau_i

    with sigma the softmax over the positive-plus-queue logits.
    Returns (losses (n,), grads (n, d)).
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    queue_embs = np.asarray(queue_embs, dtype=np.float64)
    if queue_embs.size == 0:
        raise StateError("InfoNCE needs a non-empty queue of negatives")
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    if np.any(taus <= 0.0):
        raise ValueError("temperatures must be positive")
    if anchors.shape != positives.shape:
        raise ValueError("anchors and positives must align")
    sim_pos = np.sum(anchors * positives, axis=1) / taus
    sim_q = anchors @ queue_embs.T / taus[:, None]
    logits = np.concatenate([sim_pos[:, None], sim_q], axis=1)
    losses = log_sum_exp(logits) - sim_pos
    sigma = softmax_temp(logits, 1.0)
    grads = ((sigma[:, 0] - 1.0)[:, None] * positives + sigma[:, 1:] @ queue_embs) / taus[:, None]
    return losses, grads


def info_nce(anchor: np.ndarray, positive: np.ndarray, queue_embs: np.ndarray, tau: float):
    """Single-anchor convenience wrapper; returns (loss, grad)."""
    losses, grads = info_nce_batch(anchor, positive, queue_embs, np.asarray([tau]))
    return float(losses[0]), grads[0]


def sup_con_batch(
    anchors: np.ndarray,
    labels: np.ndarray,
    queue_embs: np.ndarray,
    queue_labels: np.ndarray,
    tau: float,
):
    """Supervised contrastive loss of labeled anchors against the queue.

    Positives are queue entries sharing the anchor's label; the denominator
    runs over the whole queue:

    loss_i = -(1/|P_i|) sum_{p in P_i} log( exp(h_i.p/tau) / sum_q exp(h_i.q/tau) )

    Anchors with no positive in the queue are skipped: loss 0, gradient 0,
    and skipped[i] = True. Returns (losses (n,), grads (n, d), skipped (n,)).
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0):
        raise ValueError("supervised contrastive anchors must be labeled")
    n = anchors.shape[0]
    queue_embs = np.asarray(queue_embs, dtype=np.float64)
    queue_labels = np.asarray(queue_labels, dtype=np.int64)
    if queue_embs.shape[0] == 0:
        return np.zeros(n), np.zeros_like(anchors), np.ones(n, dtype=bool)
    scaled = anchors @ queue_embs.T / tau
    pos_mask = labels[:, None] == queue_labels[None, :]
    pos_count = pos_mask.sum(axis=1)
    skipped = pos_count == 0
    live = ~skipped
    losses = np.zeros(n)
    grads = np.zeros_like(anchors)
    if np.any(live):
        lse = log_sum_exp(scaled[live])
        counts = pos_count[live].astype(np.float64)
        mean_pos = (scaled[live] * pos_mask[live]).sum(axis=1) / counts
        losses[live] = lse - mean_pos
        sigma = softmax_temp(scaled[live], 1.0)
        pos_weights = pos_mask[live] / counts[:, None]
        grads[live] = (sigma - pos_weights) @ queue_embs / tau
    return losses, grads, skipped


def sup_con(anchor: np.ndarray, label: int, queue_embs: np.ndarray, queue_labels: np.ndarray, tau: float):
    """Single-anchor wrapper; returns (loss, grad, skipped)."""
    losses, grads, skipped = sup_con_batch(
        anchor, np.asarray([label]), queue_embs, queue_labels, tau
    )
    return float(losses[0]), grads[0], bool(skipped[0])


@dataclass(frozen=True)
class RepresentationResult:
    value: float
    grad_anchors: np.ndarray  # (n, d) gradient w.r.t. the normalized anchors
    unsup_mean: float
    sup_mean: float


def representation_loss(
    anchors: np.ndarray,
    positives: np.ndarray,
    labels: np.ndarray,
    is_labeled: np.ndarray,
    snapshot: QueueSnapshot,
    taus: np.ndarray,
    lambda_rep: float,
    tau_sup: float,
    *,
    skip_unsup: bool = False,
) -> RepresentationResult:
    """Mix the InfoNCE and supervised contrastive terms over one batch.

    value = (1 - lambda_rep) * mean_i(l_unsup) + lambda_rep * mean_{labeled}(l_sup)

    The unsupervised mean runs over every anchor; the supervised mean only
    over labeled anchors (0 when the batch has none). ``skip_unsup`` zeroes
    the InfoNCE term during queue warm-up without touching the queue.
    """
    if not 0.0 <= lambda_rep <= 1.0:
        raise ValueError("lambda_rep must be in [0, 1]")
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    n = anchors.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    is_labeled = np.atleast_1d(np.asarray(is_labeled, dtype=bool))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    grads = np.zeros_like(anchors)
    if skip_unsup:
        unsup_mean = 0.0
    else:
        lu, gu = info_nce_batch(anchors, positives, snapshot.embeddings, taus)
        unsup_mean = float(lu.mean())
        grads += (1.0 - lambda_rep) / n * gu
    lab_idx = np.flatnonzero(is_labeled)
    sup_mean = 0.0
    if lab_idx.size and len(snapshot):
        ls, gs, _ = sup_con_batch(
            anchors[lab_idx], labels[lab_idx], snapshot.embeddings, snapshot.labels, tau_sup
        )
        sup_mean = float(ls.mean())
        grads[lab_idx] += lambda_rep / lab_idx.size * gs
    value = (1.0 - lambda_rep) * unsup_mean + lambda_rep * sup_mean
    return RepresentationResult(value, grads, unsup_mean, sup_mean)


def soft_pseudo_label(
    logits: np.ndarray, uncertainty: np.ndarray, lambda_var: float, tau_t: float
) -> np.ndarray:
    """Teacher posteriors with a per-class uncertainty bias.

    q = softmax((logits + lambda_var * uncertainty) / tau_t): classes whose
    recent tailedness scores vary more get a logit boost, steering pseudo-
    labels toward classes the model is least settled on.
    """
    logits = np.asarray(logits, dtype=np.float64)
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    if logits.shape[-1] != uncertainty.shape[-1]:
        raise ValueError(
            f"uncertainty length {uncertainty.shape[-1]} != class count {logits.shape[-1]}"
        )
    return softmax_temp(logits + lambda_var * uncertainty, tau_t)


@dataclass(frozen=True)
class ClassifierResult:
    value: float
    grad_p1: np.ndarray
    grad_p2: np.ndarray
    ce_mean: float
    entropy: float


def classifier_loss(
    p1: np.ndarray,
    p2: np.ndarray,
    targets1: np.ndarray,
    targets2: np.ndarray,
    epsilon: float,
) -> ClassifierResult:
    """Cross-entropy over both views minus an entropy bonus on the mean posterior.

    value = (1/2n) sum_i [ CE(t1_i, p1_i) + CE(t2_i, p2_i) ] - epsilon * H(p_bar)
    p_bar = (1/2n) sum_i (p1_i + p2_i),  H(p) = -sum_k p_k log p_k

    Gradients are with respect to the probability tables (the softmax
    pullback happens at the caller):

    d value / d p1[i,k] = -t1[i,k] / p1[i,k] / (2n) + epsilon * (log p_bar[k] + 1) / (2n)
    """
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    p2 = np.atleast_2d(np.asarray(p2, dtype=np.float64))
    targets1 = np.atleast_2d(np.asarray(targets1, dtype=np.float64))
    targets2 = np.atleast_2d(np.asarray(targets2, dtype=np.float64))
    if not (p1.shape == p2.shape == targets1.shape == targets2.shape):
        raise ValueError("probability and target tables must share one shape")
    n = p1.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    for name, t in (("targets1", targets1), ("targets2", targets2)):
        sums = t.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(t < -1e-12):
            raise ValueError(f"{name} rows must be distributions (sum 1, non-negative)")
    if np.any(p1 <= 0.0) or np.any(p2 <= 0.0):
        raise ValueError("probabilities must be strictly positive (softmax output)")
    ce_sum = -(np.sum(targets1 * np.log(p1)) + np.sum(targets2 * np.log(p2)))
    ce_mean = ce_sum / (2.0 * n)
    p_bar = (p1.sum(axis=0) + p2.sum(axis=0)) / (2.0 * n)
    log_p_bar = np.log(p_bar)
    entropy = float(-np.sum(p_bar * log_p_bar))
    value = ce_mean - epsilon * entropy
    ent_grad = epsilon * (log_p_bar + 1.0) / (2.0 * n)
    grad_p1 = -targets1 / p1 / (2.0 * n) + ent_grad
    grad_p2 = -targets2 / p2 / (2.0 * n) + ent_grad
    return ClassifierResult(float(value), grad_p1, grad_p2, float(ce_mean), entropy)


@dataclass(frozen=True)
class LossBreakdown:
    """Every component of one training step's loss, with the mixing identities
    rep = (1-lambda_rep)*unsup + lambda_rep*sup and total = rep + cls holding
    exactly as computed."""

    unsup: float
    sup: float
    rep: float
    ce: float
    entropy: float
    cls: float
    total: float


def total_loss(rep: RepresentationResult, cls: ClassifierResult) -> LossBreakdown:
    return LossBreakdown(
        unsup=rep.unsup_mean,
        sup=rep.sup_mean,
        rep=rep.value,
        ce=cls.ce_mean,
        entropy=cls.entropy,
        cls=cls.value,
        total=rep.value + cls.value,
    )
