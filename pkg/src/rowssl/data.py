"""Datasets of embedding vectors: synthesis, long-tailed splits, views, batching, I/O.

A dataset is a flat table (id, true label, labeled flag, vector). Known
classes occupy label ids [0, n_known); novel classes follow. Labeled rows may
only carry known-class labels. The on-disk format is a line-oriented text
file whose floats round-trip bit-exactly through repr().
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ParseError
from .numerics import DOMAIN_BATCH, DOMAIN_BLOBS, DOMAIN_SPLIT, DOMAIN_VIEWS, derive_rng

FILE_MAGIC = "ROWSSL-EMB 1"


@dataclass
class EmbeddingDataset:
    """Immutable-by-convention container for a set of embedding samples."""

    ids: np.ndarray        # (n,) int64, unique
    vectors: np.ndarray    # (n, d) float64, finite
    labels: np.ndarray     # (n,) int64 in [0, n_known + n_novel)
    is_labeled: np.ndarray  # (n,) bool; True requires label < n_known
    n_known: int
    n_novel: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_labeled = np.asarray(self.is_labeled, dtype=bool)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        n = self.vectors.shape[0]
        if not (self.ids.shape == self.labels.shape == self.is_labeled.shape == (n,)):
            raise ValueError("ids, labels, is_labeled must all have one entry per vector")
        if len(np.unique(self.ids)) != n:
            raise ValueError("sample ids must be unique")
        if n and not np.all(np.isfinite(self.vectors)):
            raise ValueError("vectors must be finite")
        if self.n_known < 0 or self.n_novel < 0 or self.n_known + self.n_novel < 1:
            raise ValueError("need at least one class")
        c = self.n_known + self.n_novel
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        bad = self.is_labeled & (self.labels >= self.n_known)
        if np.any(bad):
            raise ValueError("labeled samples must carry known-class labels")

    @property
    def n_samples(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_classes(self) -> int:
        return self.n_known + self.n_novel

    def subset(self, index: np.ndarray) -> "EmbeddingDataset":
        """A new dataset holding the selected rows (metadata unchanged)."""
        return EmbeddingDataset(
            ids=self.ids[index],
            vectors=self.vectors[index],
            labels=self.labels[index],
            is_labeled=self.is_labeled[index],
            n_known=self.n_known,
            n_novel=self.n_novel,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def concat_datasets(a: EmbeddingDataset, b: EmbeddingDataset) -> EmbeddingDataset:
    """Stack two datasets with matching dimensionality and class metadata."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if (a.n_known, a.n_novel) != (b.n_known, b.n_novel):
        raise ValueError("class metadata mismatch")
    return EmbeddingDataset(
        ids=np.concatenate([a.ids, b.ids]),
        vectors=np.vstack([a.vectors, b.vectors]),
        labels=np.concatenate([a.labels, b.labels]),
        is_labeled=np.concatenate([a.is_labeled, b.is_labeled]),
        n_known=a.n_known,
        n_novel=a.n_novel,
    )


@dataclass(frozen=True)
class BlobSpec:
    """Gaussian blob synthesis: isotropic clusters around spread-out centers."""

    n_classes: int
    dim: int
    separation: float = 20.0
    std: float = 1.0
    samples_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.separation < 0 or self.std < 0:
            raise ValueError("separation and std must be >= 0")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


def generate_blobs(spec: BlobSpec) -> EmbeddingDataset:
    """Sample an unlabeled pool of Gaussian blobs, one blob per class.

    Centers sit at ``separation`` times random unit directions, so for
    moderate dimension any two centers are roughly separation*sqrt(2) apart.
    """
    rng = derive_rng(spec.seed, DOMAIN_BLOBS)
    dirs = rng.standard_normal((spec.n_classes, spec.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = spec.separation * dirs
    n = spec.n_classes * spec.samples_per_class
    vectors = np.empty((n, spec.dim))
    labels = np.empty(n, dtype=np.int64)
    for c in range(spec.n_classes):
        lo = c * spec.samples_per_class
        hi = lo + spec.samples_per_class
        vectors[lo:hi] = centers[c] + spec.std * rng.standard_normal((spec.samples_per_class, spec.dim))
        labels[lo:hi] = c
    return EmbeddingDataset(
        ids=np.arange(n, dtype=np.int64),
        vectors=vectors,
        labels=labels,
        is_labeled=np.zeros(n, dtype=bool),
        n_known=spec.n_classes,
        n_novel=0,
    )


def longtail_counts(head_count: float, gamma: float, n_classes: int) -> list[int]:
    """Per-rank sample counts head_count * gamma**(-r/(n-1)), half-up, floor 1."""
    if gamma < 1.0:
        raise ValueError(f"imbalance factor must be >= 1, got {gamma}")
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if n_classes == 1:
        return [max(1, int(math.floor(head_count + 0.5)))]
    counts = []
    for r in range(n_classes):
        raw = head_count * gamma ** (-r / (n_classes - 1))
        counts.append(max(1, int(math.floor(raw + 0.5))))
    return counts


@dataclass(frozen=True)
class SplitSpec:
    """How to carve a pool into a labeled set and an unlabeled set.

    The labeled set draws only from the first ``n_known`` classes with a
    long-tail profile headed at labeled_fraction * n_max. The unlabeled set
    draws from all classes with head count n_max; under "mcar" its class
    ordering matches the labeled one, under "mnar" it is reversed, so labeled
    head classes become unlabeled tail classes.
    """

    n_known: int
    n_novel: int
    n_max: int
    gamma_l: float
    gamma_u: float
    mismatch: str = "mcar"
    labeled_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_known < 1:
            raise ValueError("need at least one known class")
        if self.n_novel < 0:
            raise ValueError("n_novel must be >= 0")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.gamma_l < 1.0 or self.gamma_u < 1.0:
            raise ValueError("imbalance factors must be >= 1")
        if self.mismatch not in ("mcar", "mnar"):
            raise ValueError(f"mismatch must be 'mcar' or 'mnar', got {self.mismatch!r}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in (0, 1]")


def split_class_targets(spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class sample targets (labeled, unlabeled) implied by a SplitSpec."""
    c = spec.n_known + spec.n_novel
    l_by_rank = longtail_counts(spec.labeled_fraction * spec.n_max, spec.gamma_l, spec.n_known)
    u_by_rank = longtail_counts(float(spec.n_max), spec.gamma_u, c)
    labeled = np.zeros(c, dtype=np.int64)
    labeled[: spec.n_known] = l_by_rank
    unlabeled = np.zeros(c, dtype=np.int64)
    order = range(c) if spec.mismatch == "mcar" else range(c - 1, -1, -1)
    for rank, cls in enumerate(order):
        unlabeled[cls] = u_by_rank[rank]
    return labeled, unlabeled


def make_long_tailed_split(pool: EmbeddingDataset, spec: SplitSpec):
    """Draw disjoint labeled/unlabeled sets from a pool per the split spec.

    Returns (labeled, unlabeled). Selection within a class is a seeded
    permutation, so the same pool, spec, and seed always yield the same rows.
    Raises CapacityError naming the first class whose pool is too small.
    """
    c = spec.n_known + spec.n_novel
    pool_counts = np.bincount(pool.labels, minlength=c)
    if pool.labels.size and pool.labels.max() >= c:
        raise ValueError(f"pool contains labels >= {c}")
    want_l, want_u = split_class_targets(spec)
    rng = derive_rng(spec.seed, DOMAIN_SPLIT)
    take_l: list[np.ndarray] = []
    take_u: list[np.ndarray] = []
    for cls in range(c):
        need = int(want_l[cls] + want_u[cls])
        have = int(pool_counts[cls])
        if need > have:
            raise CapacityError(
                f"class {cls}: split needs {need} samples but the pool has {have}"
            )
        members = np.flatnonzero(pool.labels == cls)
        perm = members[rng.permutation(len(members))]
        take_l.append(perm[: want_l[cls]])
        take_u.append(perm[want_l[cls] : need])
    idx_l = np.concatenate(take_l) if take_l else np.empty(0, dtype=np.int64)
    idx_u = np.concatenate(take_u) if take_u else np.empty(0, dtype=np.int64)
    labeled = EmbeddingDataset(
        ids=pool.ids[idx_l],
        vectors=pool.vectors[idx_l],
        labels=pool.labels[idx_l],
        is_labeled=np.ones(len(idx_l), dtype=bool),
        n_known=spec.n_known,
        n_novel=spec.n_novel,
    )
    unlabeled = EmbeddingDataset(
        ids=pool.ids[idx_u],
        vectors=pool.vectors[idx_u],
        labels=pool.labels[idx_u],
        is_labeled=np.zeros(len(idx_u), dtype=bool),
        n_known=spec.n_known,
        n_novel=spec.n_novel,
    )
    return labeled, unlabeled


def split_leftover(pool: EmbeddingDataset, used: list[EmbeddingDataset], spec: SplitSpec) -> EmbeddingDataset:
    """Pool rows not consumed by a split, re-tagged with the split's metadata.

    Useful as a held-out test set alongside the train split.
    """
    taken = np.concatenate([d.ids for d in used]) if used else np.empty(0, dtype=np.int64)
    mask = ~np.isin(pool.ids, taken)
    rest = pool.subset(np.flatnonzero(mask))
    return EmbeddingDataset(
        ids=rest.ids,
        vectors=rest.vectors,
        labels=rest.labels,
        is_labeled=np.zeros(rest.n_samples, dtype=bool),
        n_known=spec.n_known,
        n_novel=spec.n_novel,
    )


@dataclass(frozen=True)
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray


def two_views(
    x: np.ndarray,
    noise_scale: float,
    drop_fraction: float,
    seed: int,
    sample_id: int = 0,
    step: int = 0,
) -> ViewPair:
    """Two stochastic views of a vector: Gaussian jitter plus coordinate drops.

    Each view adds noise_scale * N(0, I) and zeroes floor(drop_fraction * d)
    randomly chosen coordinates. The random stream is a pure function of
    (seed, step, sample_id), so a given sample at a given step always gets
    the same pair of views.
    """
    if noise_scale < 0.0:
        raise ValueError("noise_scale must be >= 0")
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError("drop_fraction must be in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    rng = derive_rng(seed, DOMAIN_VIEWS, int(step), int(sample_id))
    views = []
    n_drop = int(drop_fraction * d)
    for _ in range(2):
        v = x + noise_scale * rng.standard_normal(x.shape)
        if n_drop > 0:
            idx = rng.choice(d, size=n_drop, replace=False)
            v = v.copy()
            v[idx] = 0.0
        views.append(v)
    return ViewPair(views[0], views[1])


def iterate_batches(dataset: EmbeddingDataset, batch_size: int, seed: int, epoch: int):
    """Yield dataset subsets covering a seeded per-epoch shuffle.

    Every sample appears exactly once per epoch; the final batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = derive_rng(seed, DOMAIN_BATCH, int(epoch)).permutation(dataset.n_samples)
    for start in range(0, dataset.n_samples, batch_size):
        yield dataset.subset(order[start : start + batch_size])


def save_dataset(dataset: EmbeddingDataset, path: str) -> None:
    """Write the line-oriented text format (LF line endings, repr floats)."""
    lines = [FILE_MAGIC, f"{dataset.n_samples} {dataset.dim} {dataset.n_known} {dataset.n_novel}"]
    for i in range(dataset.n_samples):
        coords = " ".join(repr(float(v)) for v in dataset.vectors[i])
        lines.append(
            f"{int(dataset.ids[i])} {int(dataset.labels[i])} {int(dataset.is_labeled[i])} {coords}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> EmbeddingDataset:
    """Parse a dataset file, reporting the offending line on any defect."""
    with open(path, "r") as fh:
        raw = fh.read()
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != FILE_MAGIC:
        raise ParseError(1, f"expected magic {FILE_MAGIC!r}")
    if len(lines) < 2:
        raise ParseError(2, "missing header line")
    header = lines[1].split()
    if len(header) != 4:
        raise ParseError(2, "header must be: n_samples dim n_known n_novel")
    try:
        n, d, n_known, n_novel = (int(t) for t in header)
    except ValueError:
        raise ParseError(2, f"non-integer header field in {lines[1]!r}") from None
    if n < 0 or d < 1 or n_known < 0 or n_novel < 0 or n_known + n_novel < 1:
        raise ParseError(2, f"invalid header values {lines[1]!r}")
    if len(lines) - 2 != n:
        raise ParseError(2, f"header promises {n} rows, file has {len(lines) - 2}")
    c = n_known + n_novel
    ids = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    flags = np.empty(n, dtype=bool)
    vectors = np.empty((n, d))
    seen: set[int] = set()
    for i in range(n):
        line_no = i + 3
        tokens = lines[i + 2].split()
        if len(tokens) != 3 + d:
            raise ParseError(line_no, f"expected {3 + d} fields, got {len(tokens)}")
        try:
            sid = int(tokens[0])
            label = int(tokens[1])
            flag = int(tokens[2])
        except ValueError:
            raise ParseError(line_no, "id, label, and flag must be integers") from None
        if flag not in (0, 1):
            raise ParseError(line_no, f"is_labeled must be 0 or 1, got {flag}")
        if sid in seen:
            raise ParseError(line_no, f"duplicate sample id {sid}")
        seen.add(sid)
        if not 0 <= label < c:
            raise ParseError(line_no, f"label {label} outside [0, {c})")
        if flag and label >= n_known:
            raise ParseError(line_no, f"labeled sample carries novel-class label {label}")
        try:
            row = [float(t) for t in tokens[3:]]
        except ValueError:
            raise ParseError(line_no, "non-numeric coordinate") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(line_no, "non-finite coordinate")
        ids[i] = sid
        labels[i] = label
        flags[i] = bool(flag)
        vectors[i] = row
    return EmbeddingDataset(
        ids=ids, vectors=vectors, labels=labels, is_labeled=flags,
        n_known=n_known, n_novel=n_novel,
    )
