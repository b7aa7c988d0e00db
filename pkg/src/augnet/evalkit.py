"""Evaluation protocols for learned embeddings.

Four tools: pair-retrieval verification (does an image's augmented
counterpart land in its top-k neighbors), mean average precision over ranked
retrieval, k-means clustering scored by optimally matched accuracy, and
linear / small-MLP probes on frozen features. A deterministic PCA projection
to 2-D rounds things out for plotting.

All distance work is exact brute force in float64; ranking ties break by id
order so results do not depend on index row order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .imaging import AugmentConfig, Image, RngStream, augment_full_frame
from .encoder import EncoderState, _views, embed as encoder_embed

__all__ = [
    "RetrievalIndex",
    "RankedResult",
    "ClusterAssignment",
    "ProbeSpec",
    "knn",
    "pair_retrieval_eval",
    "mean_average_precision",
    "kmeans",
    "hungarian_accuracy",
    "train_probe",
    "pca_project",
]


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable id list plus an (n, D) vector matrix."""

    ids: list
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vecs.shape}")
        if len(self.ids) != vecs.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {vecs.shape[0]} vectors")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in index")
        object.__setattr__(self, "ids", list(self.ids))
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class RankedResult:
    query: object
    neighbor_ids: list
    distances: np.ndarray


@dataclass(frozen=True)
class ClusterAssignment:
    """labels in [0, k); centers (k, D); inertia = sum of squared distances
    to the nearest center. inertia_trace records each Lloyd iteration."""

    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class ProbeSpec:
    kind: str = "linear"
    n_classes: int = 2
    hidden: int = 256
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "nonlinear"):
            raise ValueError(f"probe kind must be linear or nonlinear, got {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.hidden < 1 or self.epochs < 1:
            raise ValueError("hidden and epochs must be >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be positive, got {self.lr}")


# ---------------------------------------------------------------------------
# retrieval


def _id_order_ranks(ids: list) -> np.ndarray:
    # rank of each id under sorted id order; the permutation-stable tie key
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[sorted(range(len(ids)), key=lambda i: ids[i])] = np.arange(len(ids))
    return ranks


def knn(index: RetrievalIndex, query, k: int, *, exclude=None) -> RankedResult:
    """Exact brute-force top-k by L2 distance; ties break by id order.

    `exclude` drops one indexed id from the candidates (used when the query
    is itself an index entry).
    """
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query shape {q.shape} does not match index dim {index.dim}")
    n = len(index.ids)
    candidates = n - (1 if exclude is not None else 0)
    if not (1 <= k <= candidates):
        raise ValueError(f"k={k} out of range for {candidates} candidates")

    diff = index.vectors - q
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.lexsort((_id_order_ranks(index.ids), dist))
    if exclude is not None:
        pos = index.ids.index(exclude)
        order = order[order != pos]
    top = order[:k]
    return RankedResult(
        query=exclude,
        neighbor_ids=[index.ids[i] for i in top],
        distances=dist[top],
    )


def _center_square(img: Image) -> Image:
    s = min(img.height, img.width)
    top = (img.height - s) // 2
    left = (img.width - s) // 2
    return Image(np.ascontiguousarray(img.pixels[top:top + s, left:left + s]))


def pair_retrieval_eval(state: EncoderState | None, images, cfg: AugmentConfig,
                        k_list, seed: int, *, short_side: int | None = None,
                        embed_fn=None) -> dict[int, float]:
    """Counterpart-retrieval accuracy: augment each source once (every
    enabled op except cropping, at native size), center-crop originals and
    augmentations to the short-side square, embed all 2n items into one
    index, and report per k the fraction of items whose counterpart is among
    their k nearest neighbors.

    `embed_fn(images) -> (len, D) array` replaces the encoder when given,
    which lets tests calibrate the protocol with stub embeddings.
    """
    images = list(images)
    n = len(images)
    if n < 2:
        raise ValueError(f"need at least 2 images, got {n}")
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1 or k_list[-1] > 2 * n - 2:
        raise ValueError(f"k values must lie in 1..{2 * n - 2}, got {k_list}")

    root = RngStream(seed)
    aug_cfg = cfg.with_ops(crop=False)
    augmented = [
        augment_full_frame(img, aug_cfg, root.derive(i)) for i, img in enumerate(images)
    ]
    pool = [_center_square(im) for im in images + augmented]
    if embed_fn is not None:
        vecs = np.asarray(embed_fn(pool), dtype=np.float64)
        if vecs.shape[0] != 2 * n:
            raise ValueError(f"embed_fn returned {vecs.shape[0]} rows for {2 * n} items")
    else:
        if state is None:
            raise ValueError("either an encoder state or embed_fn is required")
        vecs = encoder_embed(state, pool, short_side or state.spec.in_side)

    index = RetrievalIndex(ids=list(range(2 * n)), vectors=vecs)
    kmax = k_list[-1]
    hits = {k: 0 for k in k_list}
    for q in range(2 * n):
        counterpart = (q + n) % (2 * n)
        result = knn(index, vecs[q], kmax, exclude=q)
        try:
            rank = result.neighbor_ids.index(counterpart) + 1
        except ValueError:
            rank = kmax + 1
        for k in k_list:
            if rank <= k:
                hits[k] += 1
    return {k: hits[k] / (2 * n) for k in k_list}


def mean_average_precision(index: RetrievalIndex, queries, relevance) -> float:
    """mAP with AP averaged over relevant ranks, query excluded from its own
    ranking (the Oxford/Paris convention)."""
    id_pos = {id_: i for i, id_ in enumerate(index.ids)}
    aps = []
    for q in queries:
        if q not in id_pos:
            raise ValueError(f"query id {q!r} not in index")
        rel = set(relevance[q])
        if not rel:
            raise ValueError(f"query id {q!r} has an empty relevance set")
        if q in rel:
            raise ValueError(f"query id {q!r} present in its own relevance set")
        ranking = knn(index, index.vectors[id_pos[q]], len(index.ids) - 1, exclude=q)
        found = 0
        precisions = []
        for rank, nid in enumerate(ranking.neighbor_ids, start=1):
            if nid in rel:
                found += 1
                precisions.append(found / rank)
        aps.append(math.fsum(precisions) / len(rel))
    if not aps:
        raise ValueError("no queries given")
    return math.fsum(aps) / len(aps)


# ---------------------------------------------------------------------------
# clustering


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.sum(diff * diff, axis=2)


def _kmeanspp(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[gen.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = gen.choice(n, p=d2 / total)
        else:
            idx = gen.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, tol: float = 1e-6,
           max_iter: int = 300):
    k = centers.shape[0]
    trace = []
    it = 0
    while True:
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        guard = 0
        while len(np.unique(labels)) < k and guard < k:
            # revive each empty cluster at the current farthest point
            mind2 = d2[np.arange(x.shape[0]), labels]
            empty = [j for j in range(k) if not np.any(labels == j)][0]
            centers[empty] = x[mind2.argmax()]
            d2 = _sq_dists(x, centers)
            labels = d2.argmin(axis=1)
            guard += 1
        inertia = float(d2[np.arange(x.shape[0]), labels].sum())
        if trace and inertia > trace[-1] + 1e-9 * (1.0 + abs(trace[-1])):
            raise RuntimeError("Lloyd iteration increased inertia")
        trace.append(inertia)

        it += 1
        if it >= max_iter:
            break
        new_centers = centers.copy()
        for j in range(k):
            members = labels == j
            if np.any(members):
                new_centers[j] = x[members].mean(axis=0)
        move = np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max()
        if move < tol:
            break
        centers = new_centers
    return labels, centers, trace[-1], np.asarray(trace)


def kmeans(vectors, k: int, seed: int, restarts: int = 10) -> ClusterAssignment:
    """k-means++ seeding plus Lloyd iterations (tolerance 1e-6, at most 300);
    the best of `restarts` runs by inertia wins, ties by restart index."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"vectors must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for {n} vectors")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")

    best = None
    for r in range(restarts):
        gen = RngStream(seed).derive(r).generator()
        centers = _kmeanspp(x, k, gen)
        labels, centers, inertia, trace = _lloyd(x, centers)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(
                labels=labels, centers=centers, inertia=inertia, inertia_trace=trace
            )
    return best


def hungarian_accuracy(pred, truth) -> float:
    """Clustering accuracy under the optimal one-to-one cluster-to-class
    assignment of the contingency matrix."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"label shapes differ: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty label arrays")
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    cont = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(cont, (pi, ti), 1)
    rows, cols = linear_sum_assignment(cont, maximize=True)
    return float(cont[rows, cols].sum()) / p.size


# ---------------------------------------------------------------------------
# probes


def _probe_layout(kind: str, n_features: int, n_classes: int, hidden: int):
    if kind == "linear":
        return [("w0", (n_features, n_classes)), ("b0", (n_classes,))]
    layout = []
    fan = n_features
    for i in range(2):
        layout += [
            (f"w{i}", (fan, hidden)), (f"b{i}", (hidden,)),
            (f"g{i}", (hidden,)), (f"be{i}", (hidden,)),
        ]
        fan = hidden
    layout += [("w2", (fan, n_classes)), ("b2", (n_classes,))]
    return layout


def _probe_forward(kind, views, x, training, running, collect):
    if kind == "linear":
        return x @ views["w0"] + views["b0"]
    a = x
    for i in range(2):
        z = a @ views[f"w{i}"] + views[f"b{i}"]
        if training:
            mu = z.mean(axis=0)
            cen = z - mu
            var = np.mean(cen * cen, axis=0)
            running[f"mean{i}"] = 0.9 * running[f"mean{i}"] + 0.1 * mu
            running[f"var{i}"] = 0.9 * running[f"var{i}"] + 0.1 * var
        else:
            mu, var = running[f"mean{i}"], running[f"var{i}"]
            cen = z - mu
        invstd = 1.0 / np.sqrt(var + 1e-5)
        xhat = cen * invstd
        h = np.maximum(views[f"g{i}"] * xhat + views[f"be{i}"], 0.0)
        if collect is not None:
            collect.append({"a_in": a, "xhat": xhat, "invstd": invstd, "mask": h > 0})
        a = h
    return a @ views["w2"] + views["b2"]


def _probe_backward(kind, views, gviews, x, dlogits, collected):
    if kind == "linear":
        gviews["w0"][:] = x.T @ dlogits
        gviews["b0"][:] = dlogits.sum(axis=0)
        return
    a_last = collected[-1]["mask"] * (
        views["g1"] * collected[-1]["xhat"] + views["be1"]
    )
    gviews["w2"][:] = a_last.T @ dlogits
    gviews["b2"][:] = dlogits.sum(axis=0)
    da = dlogits @ views["w2"].T
    for i in (1, 0):
        c = collected[i]
        dh = np.where(c["mask"], da, 0.0)
        gviews[f"g{i}"][:] = (dh * c["xhat"]).sum(axis=0)
        gviews[f"be{i}"][:] = dh.sum(axis=0)
        dxhat = dh * views[f"g{i}"]
        m1 = dxhat.mean(axis=0)
        m2 = (dxhat * c["xhat"]).mean(axis=0)
        dz = (dxhat - m1 - c["xhat"] * m2) * c["invstd"]
        gviews[f"w{i}"][:] = c["a_in"].T @ dz
        gviews[f"b{i}"][:] = dz.sum(axis=0)
        da = dz @ views[f"w{i}"].T


def train_probe(features, labels, spec: ProbeSpec) -> float:
    """Fit a classifier on frozen features, full-batch Adam, and return
    accuracy on the held-out 20% of a seeded 80/20 split.

    Features are standardized by training-split statistics. Labels must be
    integers in [0, n_classes).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad shapes: features {x.shape}, labels {y.shape}")
    n = x.shape[0]
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    if len(np.unique(y)) < 2:
        raise ValueError("fewer than 2 distinct classes in labels")
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ValueError(f"labels outside [0, {spec.n_classes})")

    gen = RngStream(spec.seed).generator()
    perm = gen.permutation(n)
    cut = min(max(int(round(0.8 * n)), 1), n - 1)
    tr, te = perm[:cut], perm[cut:]

    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xtr = (x[tr] - mu) / sd
    xte = (x[te] - mu) / sd
    ytr, yte = y[tr], y[te]

    layout = _probe_layout(spec.kind, x.shape[1], spec.n_classes, spec.hidden)
    size = sum(int(np.prod(s)) for _, s in layout)
    params = np.zeros(size, dtype=np.float64)
    views = _views(params, layout)
    for name, shape in layout:
        if name.startswith("w"):
            views[name][:] = gen.normal(0.0, math.sqrt(1.0 / shape[0]), size=shape)
        elif name.startswith("g"):
            views[name][:] = 1.0
    running = {f"{k}{i}": (np.ones(spec.hidden) if k == "var" else np.zeros(spec.hidden))
               for k in ("mean", "var") for i in range(2)}

    m = np.zeros_like(params)
    v = np.zeros_like(params)
    grad = np.zeros_like(params)
    gviews = _views(grad, layout)
    onehot = np.eye(spec.n_classes)[ytr]
    for t in range(1, spec.epochs + 1):
        collect = [] if spec.kind == "nonlinear" else None
        logits = _probe_forward(spec.kind, views, xtr, True, running, collect)
        shifted = logits - logits.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        p = ex / ex.sum(axis=1, keepdims=True)
        dlogits = (p - onehot) / len(ytr)
        _probe_backward(spec.kind, views, gviews, xtr, dlogits, collect)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        params -= spec.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)

    test_logits = _probe_forward(spec.kind, views, xte, False, running, None)
    return float(np.mean(test_logits.argmax(axis=1) == yte))


# ---------------------------------------------------------------------------
# projection


def _power_iter(c: np.ndarray, avoid: np.ndarray | None, tol: float = 1e-9,
                max_iter: int = 50000):
    norms = np.sqrt(np.sum(c * c, axis=0))
    if norms.max() < 1e-30:
        # (near-)zero operator: any unit vector orthogonal to `avoid` works
        d = c.shape[0]
        base = np.zeros(d)
        base[0 if avoid is None else int(np.argmin(np.abs(avoid)))] = 1.0
        if avoid is not None:
            base -= (base @ avoid) * avoid
            base /= np.sqrt(base @ base)
        return base, 0.0
    v = c[:, norms.argmax()] / norms.max()
    if avoid is not None:
        v -= (v @ avoid) * avoid
        v /= np.sqrt(v @ v)
    for _ in range(max_iter):
        w = c @ v
        if avoid is not None:
            w -= (w @ avoid) * avoid
        nw = np.sqrt(w @ w)
        if nw < 1e-30:
            break
        w /= nw
        if w @ v < 0:
            w = -w
        done = np.sqrt(np.sum((w - v) ** 2)) < tol
        v = w
        if done:
            break
    else:
        raise RuntimeError("power iteration did not converge")
    return v, float(v @ c @ v)


def pca_project(vectors) -> np.ndarray:
    """Mean-centered projection onto the top two principal directions.

    Directions come from power iteration with deflation; each direction's
    largest-magnitude loading is made positive so the output is
    deterministic.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"need an (n >= 3, D >= 2) matrix, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / x.shape[0]
    if np.trace(cov) <= 0.0:
        raise ValueError("zero-variance input")
    v1, l1 = _power_iter(cov, avoid=None)
    v2, _ = _power_iter(cov - l1 * np.outer(v1, v1), avoid=v1)
    dirs = []
    for v in (v1, v2):
        j = int(np.argmax(np.abs(v)))
        dirs.append(-v if v[j] < 0 else v)
    return xc @ np.stack(dirs, axis=1)
