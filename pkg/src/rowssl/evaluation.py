"""Scoring: Hungarian-matched accuracies across the evaluation protocol matrix.

Protocols:

* ``train``          — transductive: classifier argmax over the unlabeled
                       training rows, Hungarian-matched against true labels;
* ``test-recluster`` — k-means on test projector embeddings, matched on test;
* ``test-rematch``   — classifier argmax on test, matched on test;
* ``test-inductive`` — classifier argmax on test, classes assigned through
                       the matching computed on the training split.

Alongside overall/old/new accuracy and balanced accuracy, every report
carries per-tercile (many/median/few) balanced accuracy within the known and
novel partitions, and the train protocol adds a tail-discovery ratio: how
over-represented a class group is among the lowest tailedness scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import EmbeddingDataset
from .errors import StateError, UndefinedMetricError
from .numerics import derive_seed, kmeans, l2_normalize_rows
from .tailedness import tailedness_scores

DOMAIN_EVAL = 7

GROUP_KEYS = (
    "known_many", "known_median", "known_few",
    "novel_many", "novel_median", "novel_few",
)


def hungarian(profit: np.ndarray) -> np.ndarray:
    """Maximum-profit assignment of rows to columns, one-to-one.

    Returns an int array of length n_rows with the matched column per row,
    -1 for rows left unmatched (only possible when rows outnumber columns).
    Among equally profitable assignments the lexicographically smallest one
    wins: row 0 takes its smallest viable column first, then row 1, and so
    on. Rectangular input is padded internally with zero profit.
    """
    p = np.asarray(profit, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValueError(f"profit matrix must be 2-D and non-empty, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("profit matrix must be finite")
    n_rows, n_cols = p.shape
    n = max(n_rows, n_cols)
    sq = np.zeros((n, n))
    sq[:n_rows, :n_cols] = p
    available = list(range(n))
    chosen = np.empty(n, dtype=np.int64)
    for r in range(n):
        best_val = -np.inf
        best_col = -1
        tail_rows = np.arange(r + 1, n)
        for c in available:
            rest_cols = [x for x in available if x != c]
            if tail_rows.size:
                rest = sq[np.ix_(tail_rows, rest_cols)]
                ri, ci = linear_sum_assignment(rest, maximize=True)
                rest_total = float(rest[ri, ci].sum())
            else:
                rest_total = 0.0
            # Candidates share one summation structure, so comparing them is
            # float-consistent; the first strict maximum is the smallest column.
            val = float(sq[r, c]) + rest_total
            if val > best_val:
                best_val = val
                best_col = c
        chosen[r] = best_col
        available.remove(best_col)
    out = np.full(n_rows, -1, dtype=np.int64)
    real = chosen[:n_rows] < n_cols
    out[real] = chosen[:n_rows][real]
    return out


def clustering_accuracy(preds: np.ndarray, labels: np.ndarray, n_clusters: int, n_classes: int):
    """Best-matching accuracy between cluster ids and class labels.

    Builds the cluster-by-class contingency table, Hungarian-matches it, and
    scores the fraction of samples whose cluster maps to their true class.
    Samples in unmatched clusters count as errors. Returns (acc, matching).
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and aligned")
    if preds.size == 0:
        raise ValueError("cannot score an empty sample set")
    if preds.min() < 0 or preds.max() >= n_clusters:
        raise ValueError(f"cluster ids must lie in [0, {n_clusters})")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    contingency = np.zeros((n_clusters, n_classes), dtype=np.int64)
    np.add.at(contingency, (preds, labels), 1)
    matching = hungarian(contingency.astype(np.float64))
    matched = sum(
        int(contingency[r, matching[r]]) for r in range(n_clusters) if matching[r] >= 0
    )
    return matched / preds.size, matching


def map_predictions(preds: np.ndarray, matching: np.ndarray) -> np.ndarray:
    """Convert cluster ids to class labels through a matching (-1 stays -1)."""
    preds = np.asarray(preds, dtype=np.int64)
    if preds.size and (preds.min() < 0 or preds.max() >= matching.shape[0]):
        raise ValueError("prediction outside the matching's row range")
    return matching[preds]


def per_class_recall(mapped_preds: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Recall per class; NaN for classes absent from labels."""
    out = np.full(n_classes, np.nan)
    for c in range(n_classes):
        mask = labels == c
        if np.any(mask):
            out[c] = float(np.mean(mapped_preds[mask] == c))
    return out


def balanced_accuracy(recalls: np.ndarray, class_ids) -> float:
    """Mean recall over the given classes, ignoring absent (NaN) ones."""
    class_ids = np.asarray(list(class_ids), dtype=np.int64)
    if class_ids.size == 0:
        raise UndefinedMetricError("balanced accuracy over an empty class set")
    vals = recalls[class_ids]
    present = ~np.isnan(vals)
    if not np.any(present):
        raise UndefinedMetricError("no class of the requested set appears in the labels")
    return float(np.mean(vals[present]))


def tercile_groups(class_ids, counts: np.ndarray):
    """Split classes into (many, median, few) by descending training count.

    Ties order by class index; group sizes differ by at most one with the
    remainder going to the earlier groups, so 1 class yields ([c], [], []).
    """
    order = sorted(class_ids, key=lambda c: (-int(counts[c]), c))
    k = len(order)
    base, rem = divmod(k, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    cut1, cut2 = sizes[0], sizes[0] + sizes[1]
    return order[:cut1], order[cut1:cut2], order[cut2:]


def head_tail_partition(train_counts: np.ndarray):
    """Head = classes strictly above the median training count; tail = the rest."""
    counts = np.asarray(train_counts, dtype=np.float64)
    median = float(np.median(counts))
    head = [c for c in range(counts.shape[0]) if counts[c] > median]
    tail = [c for c in range(counts.shape[0]) if counts[c] <= median]
    return head, tail


def tail_discovery_ratio(
    scores: np.ndarray,
    labels: np.ndarray,
    sample_ids: np.ndarray,
    group_classes,
    fraction: float = 0.1,
) -> float:
    """How over-represented a class group is among the lowest tailedness scores.

    With X the evaluated samples and X_sub the floor(fraction * |X|) samples
    of lowest score (ties broken by sample id):

        ratio = (|T ∩ X_sub| / |X_sub|) / (|T ∩ X| / |X|)

    A ratio above 1 means low scores concentrate on the group — the signal a
    tail detector should produce for genuinely under-sampled classes.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    n = scores.shape[0]
    k = int(fraction * n)
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n} samples selects nothing")
    group = np.asarray(list(group_classes), dtype=np.int64)
    if group.size == 0:
        raise UndefinedMetricError("empty class group")
    in_group = np.isin(labels, group)
    base_rate = float(in_group.mean())
    if base_rate == 0.0:
        raise UndefinedMetricError("class group absent from the evaluated samples")
    order = np.lexsort((sample_ids, scores))
    sub_rate = float(in_group[order[:k]].mean())
    return sub_rate / base_rate


@dataclass(frozen=True)
class EvalProtocol:
    eval_set: str          # "train" | "test"
    recluster: bool = False
    rematch: bool = False

    def __post_init__(self):
        if self.eval_set not in ("train", "test"):
            raise ValueError(f"eval_set must be 'train' or 'test', got {self.eval_set!r}")
        if self.eval_set == "train" and (self.recluster or self.rematch):
            raise ValueError("the train protocol takes no recluster/rematch flags")
        if self.recluster and not self.rematch:
            raise ValueError("reclustered ids are arbitrary; recluster requires rematch")

    @property
    def name(self) -> str:
        if self.eval_set == "train":
            return "train"
        if self.recluster:
            return "test-recluster"
        if self.rematch:
            return "test-rematch"
        return "test-inductive"

    @staticmethod
    def from_name(name: str) -> "EvalProtocol":
        table = {
            "train": EvalProtocol("train"),
            "test-recluster": EvalProtocol("test", recluster=True, rematch=True),
            "test-rematch": EvalProtocol("test", rematch=True),
            "test-inductive": EvalProtocol("test"),
        }
        if name not in table:
            raise ValueError(f"unknown protocol {name!r} (choose from {sorted(table)})")
        return table[name]


PROTOCOL_ORDER = ("train", "test-recluster", "test-rematch", "test-inductive")


@dataclass
class EvalReport:
    protocol: str
    n_samples: int
    acc: dict
    bacc: dict
    groups: dict
    phi: dict = field(default_factory=dict)
    per_class: Optional[np.ndarray] = None
    matching: Optional[np.ndarray] = None


def _head_predictions(state, features: np.ndarray) -> np.ndarray:
    logits = state.classifier.forward(features)[0]
    if state.active_heads is not None:
        logits = np.where(state.active_heads[None, :], logits, -np.inf)
    return np.argmax(logits, axis=1)


def _assemble(
    protocol_name: str,
    mapped: np.ndarray,
    labels: np.ndarray,
    train_counts: np.ndarray,
    n_known: int,
    n_classes: int,
    matching: Optional[np.ndarray],
) -> EvalReport:
    recalls = per_class_recall(mapped, labels, n_classes)
    known = list(range(n_known))
    novel = list(range(n_known, n_classes))

    def _subset_acc(class_ids):
        mask = np.isin(labels, np.asarray(class_ids, dtype=np.int64))
        if not np.any(mask):
            return None
        return float(np.mean(mapped[mask] == labels[mask]))

    def _subset_bacc(class_ids):
        if not class_ids:
            return None
        try:
            return balanced_accuracy(recalls, class_ids)
        except UndefinedMetricError:
            return None

    acc = {
        "all": float(np.mean(mapped == labels)),
        "old": _subset_acc(known) if known else None,
        "new": _subset_acc(novel) if novel else None,
    }
    bacc = {
        "all": _subset_bacc(known + novel),
        "old": _subset_bacc(known),
        "new": _subset_bacc(novel),
    }
    groups = {}
    for part_name, part in (("known", known), ("novel", novel)):
        many, median, few = tercile_groups(part, train_counts) if part else ([], [], [])
        for g_name, g in (("many", many), ("median", median), ("few", few)):
            groups[f"{part_name}_{g_name}"] = _subset_bacc(g)
    return EvalReport(
        protocol=protocol_name,
        n_samples=int(labels.shape[0]),
        acc=acc,
        bacc=bacc,
        groups=groups,
        per_class=recalls,
        matching=matching,
    )


def evaluate(
    state,
    dataset: EmbeddingDataset,
    protocol: EvalProtocol,
    *,
    train_counts: np.ndarray,
    train_matching: Optional[np.ndarray] = None,
    phi_fraction: float = 0.1,
) -> EvalReport:
    """Score a trained state on one protocol.

    ``train_counts`` are per-class sample counts of the full training split
    (they define the many/median/few terciles). The inductive protocol needs
    ``train_matching`` — the head-to-class map returned by the train
    protocol — and refuses to run without it.
    """
    if dataset.dim != state.input_dim:
        raise ValueError(f"dataset dim {dataset.dim} != model input dim {state.input_dim}")
    n_classes = dataset.n_classes
    n_known = dataset.n_known
    train_counts = np.asarray(train_counts)
    if train_counts.shape[0] != n_classes:
        raise ValueError("train_counts must cover every class")

    if protocol.eval_set == "train":
        rows = np.flatnonzero(~dataset.is_labeled)
        if rows.size == 0:
            raise ValueError("train protocol needs unlabeled training rows")
        part = dataset.subset(rows)
        feats = state.encoder.forward(part.vectors)[0]
        preds = _head_predictions(state, feats)
        _, matching = clustering_accuracy(preds, part.labels, state.n_heads, n_classes)
        mapped = map_predictions(preds, matching)
        report = _assemble(
            protocol.name, mapped, part.labels, train_counts, n_known, n_classes, matching
        )
        report.phi = _phi_block(state, part, train_counts, phi_fraction)
        return report

    if dataset.n_samples == 0:
        raise ValueError("empty evaluation set")
    feats = state.encoder.forward(dataset.vectors)[0]
    if protocol.recluster:
        embs = l2_normalize_rows(state.projector.forward(feats)[0])
        k = int(state.active_heads.sum()) if state.active_heads is not None else n_classes
        k = min(k, embs.shape[0])
        _, preds, _ = kmeans(embs, k, derive_seed(state.config.seed, DOMAIN_EVAL))
        _, matching = clustering_accuracy(preds, dataset.labels, k, n_classes)
        mapped = map_predictions(preds, matching)
    elif protocol.rematch:
        preds = _head_predictions(state, feats)
        _, matching = clustering_accuracy(preds, dataset.labels, state.n_heads, n_classes)
        mapped = map_predictions(preds, matching)
    else:
        if train_matching is None:
            raise StateError("inductive evaluation needs the train-split matching")
        preds = _head_predictions(state, feats)
        matching = np.asarray(train_matching, dtype=np.int64)
        if matching.shape[0] != state.n_heads:
            raise ValueError("train matching does not cover the classifier heads")
        mapped = map_predictions(preds, matching)
    return _assemble(
        protocol.name, mapped, dataset.labels, train_counts, n_known, n_classes, matching
    )


def _phi_block(state, part: EmbeddingDataset, train_counts: np.ndarray, fraction: float) -> dict:
    """Tail-discovery ratios for the head/tail class partition, if scores exist."""
    if state.bank is None or not state.bank.densities_valid:
        return {}
    kz = state.key_encoder.forward(part.vectors)[0]
    keys = l2_normalize_rows(state.key_projector.forward(kz)[0])
    scores = tailedness_scores(keys, state.bank)
    head, tail = head_tail_partition(train_counts)
    out = {}
    for name, group in (("head", head), ("tail", tail)):
        try:
            out[name] = tail_discovery_ratio(scores, part.labels, part.ids, group, fraction)
        except (UndefinedMetricError, ValueError):
            out[name] = None
    return out


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_report_csv(reports: list[EvalReport], path: str) -> None:
    """One row per (protocol, metric, group); missing metrics stay empty."""
    lines = ["protocol,metric,group,value"]
    for rep in reports:
        for group in ("all", "old", "new"):
            lines.append(f"{rep.protocol},acc,{group},{_fmt(rep.acc[group])}")
        for group in ("all", "old", "new"):
            lines.append(f"{rep.protocol},bacc,{group},{_fmt(rep.bacc[group])}")
        for key in GROUP_KEYS:
            lines.append(f"{rep.protocol},group_bacc,{key},{_fmt(rep.groups[key])}")
        for key in ("head", "tail"):
            if key in rep.phi:
                lines.append(f"{rep.protocol},phi,{key},{_fmt(rep.phi[key])}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def report_tree(reports: list[EvalReport]) -> dict:
    """The same numbers as the CSV, as one nested mapping."""
    tree: dict = {}
    for rep in reports:
        entry = {
            "n_samples": rep.n_samples,
            "acc": dict(rep.acc),
            "bacc": dict(rep.bacc),
            "group_bacc": dict(rep.groups),
        }
        if rep.phi:
            entry["phi"] = dict(rep.phi)
        tree[rep.protocol] = entry
    return tree


def write_report_json(reports: list[EvalReport], path: str) -> None:
    import json

    with open(path, "w", newline="\n") as fh:
        json.dump(report_tree(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
