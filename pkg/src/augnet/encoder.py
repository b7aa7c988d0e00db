"""Small convolutional encoder and its training loop.

The network is a NIN-flavored stack: each block is three 3x3 conv + batch
norm + ReLU layers followed by a 2x2 max-pool, and the head global-average
pools and maps linearly to the embedding dimension. Everything runs on numpy
arrays; convolutions are im2col plus one matrix product, so BLAS does the
heavy lifting. Parameters live in one flat vector (float32 by default,
float64 available for gradient checking) which keeps the Adam update and
checkpointing trivial.

Training follows the augmentation-identity scheme: each step samples N
source images without replacement, augments each M times, embeds all N*M
items and descends one of the losses from `augnet.losses`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import AugmentConfig, Image, RngStream, build_batch, _resize_kernel
from .losses import loss_fn, tanh_embed, tanh_strict

__all__ = [
    "EncoderSpec",
    "EncoderState",
    "FeatureTaps",
    "TrainConfig",
    "init_params",
    "forward",
    "backward",
    "adam_step",
    "train",
    "embed",
    "extract_features",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8

# stream tags separating the per-step RNG uses inside train()
_TAG_SAMPLE = 11
_TAG_BATCH = 12


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture hyperparameters; every tensor shape derives from these."""

    n_blocks: int = 3
    in_side: int = 32
    in_channels: int = 3
    block_channels: int = 96
    embed_dim: int = 192
    seed: int = 0

    def __post_init__(self):
        # paper-shaped specs use 3..5 blocks; 1 and 2 are allowed so tiny
        # gradient-check networks stay cheap
        if not (1 <= self.n_blocks <= 5):
            raise ValueError(f"n_blocks must be in 1..5, got {self.n_blocks}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.block_channels < 1 or self.embed_dim < 1:
            raise ValueError("block_channels and embed_dim must be >= 1")
        if self.in_side < 1 or self.in_side % (1 << self.n_blocks) != 0:
            raise ValueError(
                f"in_side {self.in_side} not divisible by 2^{self.n_blocks}"
            )


@dataclass
class EncoderState:
    """Flat parameter vector plus Adam moments and batch-norm running stats.

    `meta` carries checkpoint header extras (loss kind, training seed); the
    trailing cache holds activations of the last training-mode forward pass
    and never persists.
    """

    spec: EncoderSpec
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int
    bn_stats: np.ndarray
    meta: dict = field(default_factory=dict)
    _cache: dict | None = field(default=None, repr=False, compare=False)

    @property
    def dtype(self):
        return self.params.dtype


@dataclass(frozen=True)
class FeatureTaps:
    """Post-pool activation maps per block, each (batch, channels, side, side);
    tap b (1-indexed) has side in_side / 2^b."""

    maps: list


@dataclass(frozen=True)
class TrainConfig:
    n_sources_per_batch: int
    augments_per_source: int
    steps: int
    lr: float = 5e-4
    loss_kind: str = "contrast"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.n_sources_per_batch < 2:
            raise ValueError(f"need N >= 2, got {self.n_sources_per_batch}")
        if self.augments_per_source < 1:
            raise ValueError(f"need M >= 1, got {self.augments_per_source}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be positive, got {self.lr}")
        loss_fn(self.loss_kind)
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


# ---------------------------------------------------------------------------
# parameter bookkeeping


def param_layout(spec: EncoderSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs defining the flat parameter vector."""
    layout = []
    cin = spec.in_channels
    w = spec.block_channels
    for b in range(spec.n_blocks):
        for l in range(3):
            layout.append((f"b{b}l{l}.w", (3, 3, cin, w)))
            layout.append((f"b{b}l{l}.b", (w,)))
            layout.append((f"b{b}l{l}.gamma", (w,)))
            layout.append((f"b{b}l{l}.beta", (w,)))
            cin = w
    layout.append(("head.w", (w, spec.embed_dim)))
    layout.append(("head.b", (spec.embed_dim,)))
    return layout


def bn_layout(spec: EncoderSpec) -> list[tuple[str, tuple[int, ...]]]:
    w = spec.block_channels
    layout = []
    for b in range(spec.n_blocks):
        for l in range(3):
            layout.append((f"b{b}l{l}.mean", (w,)))
            layout.append((f"b{b}l{l}.var", (w,)))
    return layout


def _views(flat: np.ndarray, layout) -> dict:
    views = {}
    off = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        views[name] = flat[off:off + size].reshape(shape)
        off += size
    if off != flat.size:
        raise ValueError(f"vector length {flat.size} does not match layout size {off}")
    return views


def param_count(spec: EncoderSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(spec))


def init_params(spec: EncoderSpec, dtype=np.float32) -> EncoderState:
    """He-normal conv weights, zero biases, identity batch norm; the head
    affine uses 1/fan_in variance to keep pre-tanh outputs small."""
    gen = RngStream(spec.seed).generator()
    layout = param_layout(spec)
    params = np.zeros(sum(int(np.prod(s)) for _, s in layout), dtype=dtype)
    views = _views(params, layout)
    for name, shape in layout:
        if name.endswith(".w") and name != "head.w":
            fan_in = shape[0] * shape[1] * shape[2]
            views[name][:] = gen.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name == "head.w":
            fan_in = shape[0]
            views[name][:] = gen.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            views[name][:] = 1.0
    bn = np.zeros(sum(int(np.prod(s)) for _, s in bn_layout(spec)), dtype=dtype)
    for name, view in _views(bn, bn_layout(spec)).items():
        if name.endswith(".var"):
            view[:] = 1.0
    return EncoderState(
        spec=spec,
        params=params,
        adam_m=np.zeros_like(params),
        adam_v=np.zeros_like(params),
        step=0,
        bn_stats=bn,
    )


# ---------------------------------------------------------------------------
# forward / backward


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patches of the zero-padded 3x3 windows."""
    b, h, w, c = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    s = p.strides
    v = np.lib.stride_tricks.as_strided(
        p, (b, h, w, 3, 3, c), (s[0], s[1], s[2], s[1], s[2], s[3])
    )
    return v.reshape(b * h * w, 9 * c)


def _conv3_transpose(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of the stride-1 pad-1 3x3 convolution: convolve dy with the
    spatially flipped kernel, channel axes swapped."""
    b, h, wd, cout = dy.shape
    cin = w.shape[2]
    wrot = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return (_im2col3(dy) @ wrot.reshape(9 * cout, cin)).reshape(b, h, wd, cin)


def _maxpool(x: np.ndarray):
    """2x2/stride-2 max pool; ties pick the first cell in row-major order.
    Returns (pooled, idx) with idx in {0..3} encoding the winning corner."""
    quads = (x[:, 0::2, 0::2, :], x[:, 0::2, 1::2, :],
             x[:, 1::2, 0::2, :], x[:, 1::2, 1::2, :])
    out = np.maximum(np.maximum(quads[0], quads[1]),
                     np.maximum(quads[2], quads[3]))
    idx = np.full(out.shape, 3, dtype=np.uint8)
    idx[quads[2] == out] = 2
    idx[quads[1] == out] = 1
    idx[quads[0] == out] = 0
    return out, idx


def _maxpool_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, h2, w2, c = dy.shape
    dx = np.zeros((b, h2 * 2, w2 * 2, c), dtype=dy.dtype)
    for k, (sy, sx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        np.multiply(dy, idx == k, out=dx[:, sy::2, sx::2, :])
    return dx


def forward(state: EncoderState, batch, training: bool = False):
    """Run the encoder on (B, C, S, S) inputs already scaled to [-1, 1].

    Returns (pre_activation (B, embed_dim), FeatureTaps). Training mode
    normalizes with batch statistics, updates the running stats in place and
    caches activations for `backward`; inference mode uses running stats.
    """
    spec = state.spec
    x = np.asarray(batch)
    want = (spec.in_channels, spec.in_side, spec.in_side)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ValueError(f"batch shape {x.shape} does not match (B, {want})")
    dt = state.dtype
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dt)

    p = _views(state.params, param_layout(spec))
    s = _views(state.bn_stats, bn_layout(spec))
    cache = {"layers": [], "pools": []} if training else None
    taps = []

    for b in range(spec.n_blocks):
        for l in range(3):
            name = f"b{b}l{l}"
            bsz, h, w, cin = x.shape
            col = _im2col3(x)
            cout = p[f"{name}.w"].shape[3]
            y = col @ p[f"{name}.w"].reshape(9 * cin, cout)
            y += p[f"{name}.b"]
            y = y.reshape(bsz, h, w, cout)

            if training:
                n = y.shape[0] * y.shape[1] * y.shape[2]
                mu = y.mean(axis=(0, 1, 2))
                y -= mu
                var = np.einsum("bhwc,bhwc->c", y, y) / n
                s[f"{name}.mean"] *= 1.0 - _BN_MOMENTUM
                s[f"{name}.mean"] += _BN_MOMENTUM * mu
                s[f"{name}.var"] *= 1.0 - _BN_MOMENTUM
                s[f"{name}.var"] += _BN_MOMENTUM * var
            else:
                y -= s[f"{name}.mean"]
                var = s[f"{name}.var"]
            invstd = (1.0 / np.sqrt(var + _BN_EPS)).astype(dt)
            y *= invstd
            xhat = y
            act = xhat * p[f"{name}.gamma"]
            act += p[f"{name}.beta"]
            np.maximum(act, 0.0, out=act)

            if training:
                cache["layers"].append({
                    "name": name, "col": col, "xhat": xhat, "invstd": invstd,
                    "mask": act > 0.0, "shape": (bsz, h, w, cin, cout),
                })
            x = act
        x, idx = _maxpool(x)
        if training:
            cache["pools"].append(idx)
        taps.append(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))

    gap = x.mean(axis=(1, 2))
    pre = gap @ p["head.w"] + p["head.b"]
    if training:
        cache["gap"] = gap
        cache["pre"] = pre
        state._cache = cache
    return pre, FeatureTaps(maps=taps)


def backward(state: EncoderState, loss_grad) -> np.ndarray:
    """Gradient of the scalar loss w.r.t. the flat parameter vector.

    `loss_grad` is d(loss)/d(embedding), shape (B, embed_dim); the tanh
    squash between pre-activations and embeddings is chained here. Requires
    activations cached by a training-mode forward pass.
    """
    cache = state._cache
    if cache is None:
        raise RuntimeError("backward called without a preceding training-mode forward")
    spec = state.spec
    dt = state.dtype
    p = _views(state.params, param_layout(spec))
    grad = np.zeros_like(state.params)
    g = _views(grad, param_layout(spec))

    e = np.tanh(cache["pre"].astype(np.float64))
    dl = np.asarray(loss_grad, dtype=np.float64)
    if dl.shape != e.shape:
        raise ValueError(f"loss grad shape {dl.shape} does not match {e.shape}")
    dpre = (dl * (1.0 - e * e)).astype(dt)

    g["head.w"][:] = cache["gap"].T @ dpre
    g["head.b"][:] = dpre.sum(axis=0)
    dgap = dpre @ p["head.w"].T

    bsz = dgap.shape[0]
    side = spec.in_side >> spec.n_blocks
    dx = np.ascontiguousarray(np.broadcast_to(
        (dgap / (side * side))[:, None, None, :],
        (bsz, side, side, spec.block_channels),
    ))

    layers = cache["layers"]
    for b in reversed(range(spec.n_blocks)):
        dx = _maxpool_backward(dx, cache["pools"][b])
        for l in reversed(range(3)):
            lc = layers[b * 3 + l]
            name = lc["name"]
            _, h, w, cin, cout = lc["shape"]
            n = bsz * h * w
            dy = np.multiply(dx, lc["mask"], out=dx)

            xhat = lc["xhat"]
            g[f"{name}.gamma"][:] = np.einsum("bhwc,bhwc->c", dy, xhat)
            g[f"{name}.beta"][:] = dy.sum(axis=(0, 1, 2))
            dy *= p[f"{name}.gamma"]
            dxhat = dy
            m1 = dxhat.mean(axis=(0, 1, 2))
            m2 = np.einsum("bhwc,bhwc->c", dxhat, xhat) / n
            dxhat -= m1
            dxhat -= xhat * m2
            dxhat *= lc["invstd"]
            dconv = dxhat

            dflat = dconv.reshape(-1, cout)
            g[f"{name}.w"][:] = (lc["col"].T @ dflat).reshape(3, 3, cin, cout)
            g[f"{name}.b"][:] = dflat.sum(axis=0)
            if b == 0 and l == 0:
                break  # input gradient is never used
            dx = _conv3_transpose(dconv, p[f"{name}.w"])
    return grad


def adam_step(state: EncoderState, grad, lr: float) -> EncoderState:
    """One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected);
    returns a new state with step incremented."""
    gvec = np.asarray(grad, dtype=state.dtype)
    if gvec.shape != state.params.shape:
        raise ValueError(f"grad shape {gvec.shape} != params shape {state.params.shape}")
    if not np.all(np.isfinite(gvec)):
        raise ValueError("non-finite gradient")
    if not (math.isfinite(lr) and lr > 0):
        raise ValueError(f"lr must be positive, got {lr}")
    t = state.step + 1
    m = _ADAM_B1 * state.adam_m + (1.0 - _ADAM_B1) * gvec
    v = _ADAM_B2 * state.adam_v + (1.0 - _ADAM_B2) * gvec * gvec
    mhat = m / (1.0 - _ADAM_B1 ** t)
    vhat = v / (1.0 - _ADAM_B2 ** t)
    params = state.params - lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)
    return EncoderState(
        spec=state.spec, params=params, adam_m=m, adam_v=v, step=t,
        bn_stats=state.bn_stats, meta=state.meta,
    )


# ---------------------------------------------------------------------------
# training loop


def _items_to_input(items: list[Image]) -> np.ndarray:
    arr = np.stack([im.pixels for im in items]).astype(np.float32)
    arr = arr / 127.5 - 1.0
    return arr.transpose(0, 3, 1, 2)


def train(dataset, cfg: TrainConfig, spec: EncoderSpec, *,
          log_stream=None, checkpoint_dir=None, on_step=None) -> EncoderState:
    """Run the augmentation-identity training loop and return the final state.

    Step t samples cfg.n_sources_per_batch sources without replacement,
    builds the N x M augmented batch, and applies one Adam update of the
    configured loss. `log_stream` receives one "step<TAB>loss" line per step;
    `checkpoint_dir` gets a checkpoint every cfg.checkpoint_every steps;
    `on_step(step, loss_value, state)` is a progress hook.
    """
    n = cfg.n_sources_per_batch
    m = cfg.augments_per_source
    if len(dataset) < n:
        raise ValueError(f"dataset has {len(dataset)} images, need at least {n}")
    if cfg.augment.out_side != spec.in_side:
        raise ValueError(
            f"augment out_side {cfg.augment.out_side} != encoder in_side {spec.in_side}"
        )

    state = init_params(spec)
    state.meta = {"loss_kind": cfg.loss_kind, "seed": cfg.seed}
    root = RngStream(cfg.seed)
    lf = loss_fn(cfg.loss_kind)

    for t in range(cfg.steps):
        pick = root.derive(_TAG_SAMPLE, t).generator().choice(
            len(dataset), size=n, replace=False
        )
        batch = build_batch(
            [dataset[int(i)] for i in pick], m, cfg.augment, root.derive(_TAG_BATCH, t)
        )
        x = _items_to_input(batch.items)
        pre, _ = forward(state, x, training=True)
        result = lf(tanh_embed(pre.astype(np.float64).reshape(n, m, -1)))
        grad = backward(state, result.grad.reshape(n * m, -1))
        state = adam_step(state, grad, cfg.lr)
        state.meta = {"loss_kind": cfg.loss_kind, "seed": cfg.seed}

        if log_stream is not None:
            log_stream.write(f"{t}\t{result.value:.9e}\n")
        if on_step is not None:
            on_step(t, result.value, state)
        if (checkpoint_dir is not None and cfg.checkpoint_every > 0
                and (t + 1) % cfg.checkpoint_every == 0):
            from . import store
            store.save_checkpoint(
                state, f"{checkpoint_dir}/step{t + 1:06d}.augc"
            )
    return state


# ---------------------------------------------------------------------------
# inference


def _preprocess(img: Image, short_side: int, in_side: int) -> np.ndarray:
    """Short-side resize, center crop to a square multiple of in_side, scale
    to in_side, and map to float32 [-1, 1] CHW."""
    px = img.pixels
    h, w = px.shape[:2]
    if min(h, w) != short_side:
        scale = short_side / min(h, w)
        if h <= w:
            nh, nw = short_side, max(short_side, round(w * scale))
        else:
            nh, nw = max(short_side, round(h * scale)), short_side
        px = _resize_kernel(px[None], nh, nw)[0]
        h, w = nh, nw
    side = in_side * (short_side // in_side) if short_side >= in_side else short_side
    top = (h - side) // 2
    left = (w - side) // 2
    px = px[top:top + side, left:left + side]
    if side != in_side:
        px = _resize_kernel(px[None], in_side, in_side)[0]
    return (px.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def _inference_batches(state, images, short_side, chunk=256):
    spec = state.spec
    stack = [_preprocess(im, short_side, spec.in_side) for im in images]
    for start in range(0, len(stack), chunk):
        yield forward(state, np.stack(stack[start:start + chunk]), training=False)


def embed(state: EncoderState, images, short_side: int) -> np.ndarray:
    """Embed images into (n, embed_dim) float64 rows, all strictly in (-1, 1)."""
    images = list(images)
    if not images:
        raise ValueError("no images to embed")
    if short_side < 1:
        raise ValueError(f"short_side must be >= 1, got {short_side}")
    rows = [pre for pre, _ in _inference_batches(state, images, short_side)]
    return tanh_strict(np.concatenate(rows).astype(np.float64))


def extract_features(state: EncoderState, images, tap: int) -> np.ndarray:
    """Spatially average-pooled activations of block `tap` (1-indexed),
    shape (n, block_channels)."""
    images = list(images)
    if not images:
        raise ValueError("no images")
    if not (1 <= tap <= state.spec.n_blocks):
        raise ValueError(f"tap must be in 1..{state.spec.n_blocks}, got {tap}")
    out = []
    for _, taps in _inference_batches(state, images, state.spec.in_side):
        out.append(taps.maps[tap - 1].mean(axis=(2, 3)).astype(np.float64))
    return np.concatenate(out)
