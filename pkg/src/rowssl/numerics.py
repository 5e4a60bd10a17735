"""Deterministic numerical kernels the rest of the package builds on.

Everything here is float64 numpy and purely functional in its inputs plus an
explicit integer seed: calling twice with the same arguments is bit-identical.
Gradients are hand-derived (closed form), never numerical, so the test suite
can check them against finite differences as an independent oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

# Spawn-key domains so independently seeded streams never collide even when
# they share the base seed.
DOMAIN_INIT = 0
DOMAIN_BATCH = 1
DOMAIN_VIEWS = 2
DOMAIN_PROTO = 3
DOMAIN_BLOBS = 4
DOMAIN_SPLIT = 5
DOMAIN_KMEANS = 6


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, *key); same inputs, same stream."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def derive_seed(seed: int, *key: int) -> int:
    """Collapse (seed, *key) to a single integer seed for APIs that take one."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.

    A zero vector cannot be normalized; it falls back to the first basis
    vector and emits a RuntimeWarning so the caller can notice.
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        warnings.warn("l2_normalize: zero vector, substituting e1", RuntimeWarning, stacklevel=2)
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization with the same zero-row fallback as l2_normalize."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if np.any(zero):
        warnings.warn("l2_normalize_rows: zero row, substituting e1", RuntimeWarning, stacklevel=2)
        m = m.copy()
        m[zero, 0] = 1.0
        norms = np.where(norms == 0.0, 1.0, norms)
    return m / norms


def normalize_rows_backward(raw: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of row normalization: pull d(loss)/d(v/|v|) back to d(loss)/dv.

    For u = v/|v|:  du/dv = (I - u u^T)/|v|, so g_v = (g - (g.u) u)/|v|.
    """
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norms
    dot = np.sum(grad_out * unit, axis=1, keepdims=True)
    return (grad_out - dot * unit) / norms


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled softmax along the last axis (max-shifted for stability)."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    x = np.asarray(logits, dtype=np.float64) / tau
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, tau: float) -> np.ndarray:
    """Pull a gradient at softmax output back to the pre-softmax logits.

    With p = softmax(z/tau):  g_z[j] = p[j]*(g[j] - sum_k g[k] p[k]) / tau.
    """
    dot = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - dot) / tau


def log_sum_exp(x: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(x))) with max subtraction."""
    m = np.max(x, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


class SmallNet:
    """A stack of affine layers with ReLU between them (none after the last).

    Forward returns a cache; backward consumes it, accumulates parameter
    gradients into ``w_grads``/``b_grads`` and returns the gradient with
    respect to the input, so several forward/backward passes per step can
    share parameters. Weights use He initialization from a seeded stream.
    """

    def __init__(self, dims: list[int], seed: int):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be positive, got {dims}")
        self.dims = [int(d) for d in dims]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            rng = derive_rng(seed, DOMAIN_INIT, i)
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))
        self.w_grads = [np.zeros_like(w) for w in self.weights]
        self.b_grads = [np.zeros_like(b) for b in self.biases]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def gradients(self) -> list[np.ndarray]:
        return self.w_grads + self.b_grads

    def zero_grad(self) -> None:
        for g in self.w_grads + self.b_grads:
            g[...] = 0.0

    def forward(self, x: np.ndarray):
        """Run the net; x may be a single vector (d,) or a batch (n, d).

        Returns (output, cache) where output matches the input's batch shape.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.dims[0]:
            raise ValueError(f"expected input dim {self.dims[0]}, got {h.shape[1]}")
        pre = []
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
            acts.append(h)
        out = h[0] if squeeze else h
        return out, (pre, acts, squeeze)

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the input gradient."""
        pre, acts, squeeze = cache
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (pre[i] > 0.0)
            self.w_grads[i] += acts[i].T @ g
            self.b_grads[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g[0] if squeeze else g

    def copy(self) -> "SmallNet":
        other = SmallNet.__new__(SmallNet)
        other.dims = list(self.dims)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.w_grads = [np.zeros_like(w) for w in self.weights]
        other.b_grads = [np.zeros_like(b) for b in self.biases]
        return other


def net_forward_backward(net: SmallNet, x: np.ndarray, upstream: np.ndarray):
    """One-shot convenience: forward pass plus backprop of a given upstream.

    Returns (output, input_gradient); parameter gradients accumulate in the net.
    """
    out, cache = net.forward(x)
    return out, net.backward(cache, upstream)


class CosineClassifier:
    """Linear heads scored by cosine similarity.

    Each row of ``weight`` acts as a class direction; the logit for class k is
    cos(z, w_k), so raw logits always lie in [-1, 1]. Gradients flow to both
    the input and the weight rows through the normalization.
    """

    def __init__(self, n_classes: int, dim: int, seed: int):
        if n_classes < 1 or dim < 1:
            raise ValueError("n_classes and dim must be positive")
        rng = derive_rng(seed, DOMAIN_INIT, 1000)
        self.weight = l2_normalize_rows(rng.standard_normal((n_classes, dim)))
        self.w_grad = np.zeros_like(self.weight)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def zero_grad(self) -> None:
        self.w_grad[...] = 0.0

    def forward(self, z: np.ndarray):
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 1
        z2 = np.atleast_2d(z)
        z_norm = np.linalg.norm(z2, axis=1, keepdims=True)
        z_hat = z2 / z_norm
        w_norm = np.linalg.norm(self.weight, axis=1, keepdims=True)
        w_hat = self.weight / w_norm
        logits = z_hat @ w_hat.T
        cache = (z_norm, z_hat, w_norm, w_hat, squeeze)
        return (logits[0] if squeeze else logits), cache

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        z_norm, z_hat, w_norm, w_hat, squeeze = cache
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        # Through z_hat: g_zhat = g @ w_hat, then the unit-norm pullback.
        g_zhat = g @ w_hat
        dot = np.sum(g_zhat * z_hat, axis=1, keepdims=True)
        g_z = (g_zhat - dot * z_hat) / z_norm
        # Through w_hat rows: g_what = g.T @ z_hat, same pullback per row.
        g_what = g.T @ z_hat
        dot_w = np.sum(g_what * w_hat, axis=1, keepdims=True)
        self.w_grad += (g_what - dot_w * w_hat) / w_norm
        return g_z[0] if squeeze else g_z

    def copy(self) -> "CosineClassifier":
        other = CosineClassifier.__new__(CosineClassifier)
        other.weight = self.weight.copy()
        other.w_grad = np.zeros_like(self.weight)
        return other


class SgdMomentum:
    """SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.

    Updates happen in place on the registered arrays, so model objects that
    expose their parameter arrays see the new values immediately.
    """

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9):
        if lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        lr = self.lr if lr is None else float(lr)
        if lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        for p, v, g in zip(self.params, self.velocity, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            v *= self.momentum
            v += g
            p -= lr * v


@dataclass(frozen=True)
class CosineSchedule:
    """Half-cosine interpolation from ``start`` at step 0 to ``end`` at step >= total."""

    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")


def schedule_value(schedule: CosineSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.total_steps == 0 or step >= schedule.total_steps:
        return schedule.end
    if step == 0:
        return schedule.start
    frac = 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    return schedule.end + (schedule.start - schedule.end) * frac


def ema_params(target: list[np.ndarray], source: list[np.ndarray], momentum: float) -> None:
    """In-place exponential moving average: target <- m*target + (1-m)*source."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if len(target) != len(source):
        raise ValueError("target/source parameter lists differ in length")
    for t, s in zip(target, source):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {s.shape}")
        t *= momentum
        t += (1.0 - momentum) * s


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2 sampling, uniform fallback when all-zero distances."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _pairwise_sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances; clip the expansion's negative dust.
    sq = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def kmeans(points: np.ndarray, k: int, seed: int, *, tol: float = 1e-6, max_iter: int = 300):
    """Lloyd's k-means with k-means++ seeding, deterministic for a given seed.

    Ties in assignment go to the lowest centroid index. An emptied cluster is
    repaired by relocating its centroid onto the point farthest from its own
    centroid (among points whose cluster keeps at least two members), which
    keeps the within-cluster sum of squares non-increasing across iterations.

    Returns (centroids (k, d), assignments (n,), inertia).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {pts.shape}")
    n = pts.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(DOMAIN_KMEANS,)))
    centroids = _kmeans_pp(pts, k, rng)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _pairwise_sq_dists(pts, centroids)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            counts = np.bincount(assign, minlength=k)
            dist_own = d2[np.arange(n), assign]
            eligible = np.flatnonzero(counts[assign] > 1)
            p = eligible[int(np.argmax(dist_own[eligible]))]
            assign[p] = j
            centroids[j] = pts[p]
            d2[p] = _pairwise_sq_dists(pts[p : p + 1], centroids)[0]
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = pts[assign == j].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    diffs = pts - centroids[assign]
    inertia = float(np.sum(diffs * diffs))
    return centroids, assign, inertia
