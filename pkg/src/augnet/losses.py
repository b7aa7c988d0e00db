"""Embedding-batch losses for augmentation-identity training.

A batch holds N sources with M augmented items each. Items are embedded with
a tanh squash, every source gets a centroid (the plain mean of its M
embeddings, the item itself included), and the two losses score each item by
its non-squared L2 distances to all N centroids:

  softmax:  L_ij = d(e_ij, c_i) + log sum_k exp(-d(e_ij, c_k))
  contrast: L_ij = d(e_ij, c_i) - min_{k != i} d(e_ij, c_k)

Both reduce by the arithmetic mean over the N*M items. All math is float64.
Sums over the source axis use exact (fsum) accumulation, so relabeling
sources permutes per-item rows and leaves the value bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmbeddingBatch",
    "Centroids",
    "DistanceMatrix",
    "LossResult",
    "tanh_embed",
    "centroids",
    "pairwise_l2",
    "softmax_loss",
    "contrast_loss",
    "loss_fn",
]

# (N, D) centroid matrix / (N*M, N) item-to-centroid distances, both float64
Centroids = np.ndarray
DistanceMatrix = np.ndarray


@dataclass(frozen=True)
class EmbeddingBatch:
    """Float64 array of shape (N, M, D): N sources, M augmentations, dim D."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"embedding batch must be (N, M, D), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding batch contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_sources(self) -> int:
        return self.values.shape[0]

    @property
    def per_source(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LossResult:
    """value: mean loss; per_item: (N, M) losses; grad: (N, M, D) d(value)/d(e);
    probabilities: (N*M, N) softmax rows, None for the contrast loss."""

    value: float
    per_item: np.ndarray
    grad: np.ndarray
    probabilities: np.ndarray | None = None


def _values(e) -> np.ndarray:
    if isinstance(e, EmbeddingBatch):
        return e.values
    return EmbeddingBatch(np.asarray(e)).values


def tanh_strict(x: np.ndarray) -> np.ndarray:
    """tanh with the result nudged strictly inside (-1, 1); np.tanh saturates
    to exactly +-1.0 for |x| above ~19."""
    lim = np.nextafter(1.0, 0.0)
    return np.clip(np.tanh(x), -lim, lim)


def tanh_embed(raw) -> EmbeddingBatch:
    """Squash raw encoder outputs (N, M, D) into an EmbeddingBatch."""
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim != 3:
        raise ValueError(f"raw activations must be (N, M, D), got shape {r.shape}")
    return EmbeddingBatch(tanh_strict(r))


def centroids(e) -> Centroids:
    """Per-source mean embedding, the item itself included."""
    return _values(e).mean(axis=1)


def pairwise_l2(e, c: Centroids) -> DistanceMatrix:
    """Non-squared L2 distances, item rows (i major, j minor) by centroid columns."""
    v = _values(e)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != v.shape[2]:
        raise ValueError(
            f"centroid shape {c.shape} incompatible with embedding dim {v.shape[2]}"
        )
    flat = v.reshape(-1, v.shape[2])
    diff = flat[:, None, :] - c[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _unit_diffs(flat: np.ndarray, c: np.ndarray, dist: np.ndarray) -> np.ndarray:
    # d(dist)/d(e) directions; the subgradient at coincident points is zero
    diff = flat[:, None, :] - c[None, :, :]
    safe = np.where(dist > 0.0, dist, 1.0)
    return np.where(dist[:, :, None] > 0.0, diff / safe[:, :, None], 0.0)


def _assemble_grad(g: np.ndarray, u: np.ndarray, n: int, m: int) -> np.ndarray:
    """Total gradient of the mean loss w.r.t. each e_ij.

    g[r, k] = dL_r / d(dist[r, k]) for item row r. The direct term moves
    e_ij; the correction term accounts for e_ij shifting its own centroid
    by 1/M (every row's distance to centroid i depends on e_ij).
    """
    gu = g[:, :, None] * u
    direct = gu.sum(axis=1)
    per_centroid = gu.sum(axis=0)
    rows = direct - per_centroid[np.repeat(np.arange(n), m)] / m
    return (rows / (n * m)).reshape(n, m, -1)


def _row_lse(neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max-shifted log-sum-exp per row with exact inner summation.

    Returns (lse, shifted exponentials). fsum makes the sum independent of
    column order, which keeps loss values exact under source relabeling.
    """
    mx = neg.max(axis=1, keepdims=True)
    ex = np.exp(neg - mx)
    sums = np.array([math.fsum(row) for row in ex])
    return mx[:, 0] + np.log(sums), ex


def softmax_loss(e) -> LossResult:
    """Cross-entropy of classifying each item to its own source by
    exp(-distance) score, with analytic gradient."""
    v = _values(e)
    n, m, d = v.shape
    if n < 2:
        raise ValueError(f"softmax loss needs at least 2 sources, got N={n}")
    c = v.mean(axis=1)
    flat = v.reshape(n * m, d)
    diff = flat[:, None, :] - c[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))

    own = np.repeat(np.arange(n), m)
    lse, ex = _row_lse(-dist)
    per_item = dist[np.arange(n * m), own] + lse
    value = math.fsum(per_item) / (n * m)

    p = ex / ex.sum(axis=1, keepdims=True)
    g = -p
    g[np.arange(n * m), own] += 1.0
    u = _unit_diffs(flat, c, dist)
    grad = _assemble_grad(g, u, n, m)
    return LossResult(value=value, per_item=per_item.reshape(n, m), grad=grad,
                      probabilities=p)


def contrast_loss(e) -> LossResult:
    """Own-centroid distance minus the hardest (nearest) other centroid
    distance; min ties resolve to the smallest source index."""
    v = _values(e)
    n, m, d = v.shape
    if n < 2:
        raise ValueError(f"contrast loss needs at least 2 sources, got N={n}")
    c = v.mean(axis=1)
    flat = v.reshape(n * m, d)
    diff = flat[:, None, :] - c[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))

    rows = np.arange(n * m)
    own = np.repeat(np.arange(n), m)
    others = dist.copy()
    others[rows, own] = np.inf
    rival = others.argmin(axis=1)
    per_item = dist[rows, own] - others[rows, rival]
    value = math.fsum(per_item) / (n * m)

    g = np.zeros_like(dist)
    g[rows, own] += 1.0
    g[rows, rival] -= 1.0
    u = _unit_diffs(flat, c, dist)
    grad = _assemble_grad(g, u, n, m)
    return LossResult(value=value, per_item=per_item.reshape(n, m), grad=grad)


def loss_fn(kind: str):
    """Look up a loss by its config name."""
    table = {"softmax": softmax_loss, "contrast": contrast_loss}
    if kind not in table:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(table)}")
    return table[kind]
