"""Image augmentation primitives and the N x M batch builder.

All operations map 8-bit rasters to 8-bit rasters. Pixel arithmetic runs in
float64 and is quantized with a single rule (round half away from zero, then
clamp to [0, 255]) so independent scalar oracles can reproduce every output
exactly. Randomized operations draw from an explicit `RngStream`, never from
global state; a batch item (i, j) owns the stream derived from the batch
stream and (i, j), which makes batches reproducible and trivially
parallelizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Image",
    "OpToggles",
    "AugmentConfig",
    "RngStream",
    "Batch",
    "rotate",
    "gaussian_noise",
    "crop_resize",
    "reduce_resolution",
    "adjust_hue",
    "adjust_saturation",
    "adjust_brightness",
    "cutout",
    "hflip",
    "augment_once",
    "augment_full_frame",
    "build_batch",
]

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Image:
    """An 8-bit raster of shape (height, width, channels), channels 1 or 3."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise ValueError(f"image array must be HxWxC, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"image dtype must be uint8, got {px.dtype}")
        if px.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {px.shape[2]}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"empty image: shape {px.shape}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_array(cls, arr) -> "Image":
        """Build from any integer array in [0, 255] (2-D arrays become 1-channel)."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.dtype != np.uint8:
            if np.any((a < 0) | (a > 255)):
                raise ValueError("pixel values outside [0, 255]")
            a = a.astype(np.uint8)
        return cls(a)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.all(self.pixels == other.pixels)
        )


@dataclass(frozen=True)
class OpToggles:
    """Per-operation enable flags, for ablation-style pipelines."""

    rotation: bool = True
    noise: bool = True
    crop: bool = True
    resolution: bool = True
    hue: bool = True
    saturation: bool = True
    brightness: bool = True
    cutout: bool = True
    hflip: bool = True


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling-distribution parameters for the augmentation pipeline.

    Defaults: rotation U(-35, 35) degrees, per-item noise std U(0, 20),
    crop side fraction U(crop_rate_min, 1), resolution reduction U(0.1, 1),
    hue shift U(-25, 25) on the [0, 180) hue scale, saturation shift
    U(-150, 50), brightness scale U(0.75, 1.25) with bias U(-25, 25),
    0..2 cutout rectangles covering 15% per side, horizontal flip with
    probability 0.5.
    """

    rotation_deg: tuple[float, float] = (-35.0, 35.0)
    noise_sigma: float = 20.0
    crop_rate_min: float = 0.2
    resolution_rate: tuple[float, float] = (0.1, 1.0)
    hue_delta: tuple[float, float] = (-25.0, 25.0)
    saturation_delta: tuple[float, float] = (-150.0, 50.0)
    brightness_scale: tuple[float, float] = (0.75, 1.25)
    brightness_bias: tuple[float, float] = (-25.0, 25.0)
    cutout_count: tuple[int, int] = (0, 2)
    cutout_frac: float = 0.15
    hflip_prob: float = 0.5
    out_side: int = 32
    enabled: OpToggles = field(default_factory=OpToggles)

    def __post_init__(self):
        for name in ("rotation_deg", "resolution_rate", "hue_delta",
                     "saturation_delta", "brightness_scale", "brightness_bias"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name}: empty or non-finite interval ({lo}, {hi})")
        rlo, rhi = self.resolution_rate
        if not (0.0 < rlo <= rhi <= 1.0):
            raise ValueError(f"resolution_rate must lie in (0, 1], got ({rlo}, {rhi})")
        if not (0.0 < self.crop_rate_min <= 1.0):
            raise ValueError(f"crop_rate_min must be in (0, 1], got {self.crop_rate_min}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        clo, chi = self.cutout_count
        if not (0 <= clo <= chi):
            raise ValueError(f"cutout_count interval invalid: ({clo}, {chi})")
        if not (0.0 < self.cutout_frac < 1.0):
            raise ValueError(f"cutout_frac must be in (0, 1), got {self.cutout_frac}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.out_side < 1:
            raise ValueError(f"out_side must be >= 1, got {self.out_side}")

    def with_ops(self, **flags: bool) -> "AugmentConfig":
        """Copy of this config with some enable flags changed."""
        return replace(self, enabled=replace(self.enabled, **flags))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream: (seed, stream_id) -> draw sequence."""

    seed: int
    stream_id: int = 0

    def derive(self, *keys: int) -> "RngStream":
        """Child stream obtained by absorbing integer keys into the stream id."""
        sid = self.stream_id & _MASK64
        for k in keys:
            sid = _splitmix64(sid ^ ((k + 0x9E3779B97F4A7C15) & _MASK64))
        return RngStream(self.seed, sid)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64])
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Batch:
    """N*M augmented items ordered row-major by source: item (i, j) at i*M + j."""

    sources: list[int]
    items: list[Image]
    n_sources: int
    per_source: int

    def __post_init__(self):
        if len(self.items) != self.n_sources * self.per_source:
            raise ValueError("item count does not equal n_sources * per_source")

    def item(self, i: int, j: int) -> Image:
        return self.items[i * self.per_source + j]


# ---------------------------------------------------------------------------
# pixel math helpers (batched kernels; axis 0 is the item axis)


def _quantize(x: np.ndarray) -> np.ndarray:
    # round half away from zero, then clamp; on a [0, 255]-clamped output
    # floor(x + 0.5) implements the same mapping for every real input
    return np.clip(np.floor(x + 0.5), 0.0, 255.0).astype(np.uint8)


def _rotate_kernel(arr: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    b, h, w, c = arr.shape
    theta = np.radians(degrees.astype(np.float64))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    cos = np.cos(theta)[:, None, None]
    sin = np.sin(theta)[:, None, None]
    # inverse map: positive angles turn the content counter-clockwise on screen
    src_y = cy - sin * xx + cos * yy
    src_x = cx + cos * xx + sin * yy

    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    fy = src_y - y0
    fx = src_x - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)

    # One-pixel 128 border: taps that fall outside land on the border after
    # clipping to [-1, h] x [-1, w], which reproduces the fill value without
    # per-tap validity masks.
    padded = np.pad(arr, ((0, 0), (1, 1), (1, 1), (0, 0)), constant_values=128)
    row = w + 2
    base = (np.arange(b, dtype=np.int64) * (h + 2))[:, None, None]
    ya = (base + np.clip(y0i, -1, h) + 1) * row
    yb = (base + np.clip(y0i + 1, -1, h) + 1) * row
    xa = np.clip(x0i, -1, w) + 1
    xb = np.clip(x0i + 1, -1, w) + 1
    i00 = ya + xa
    i01 = ya + xb
    i10 = yb + xa
    i11 = yb + xb
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    planes = padded.transpose(3, 0, 1, 2).reshape(c, -1)
    out = np.empty((b, h, w, c), dtype=np.float64)
    tmp = np.empty((b, h, w), dtype=np.float64)
    for ch in range(c):
        pl = planes[ch]
        acc = w00 * np.take(pl, i00)
        acc += np.multiply(w01, np.take(pl, i01), out=tmp)
        acc += np.multiply(w10, np.take(pl, i10), out=tmp)
        acc += np.multiply(w11, np.take(pl, i11), out=tmp)
        out[..., ch] = acc
    return _quantize(out)


def _resize_kernel(arr, out_h, out_w, window=None, quantize=True):
    """Bilinear resize with half-pixel centers, batched over axis 0.

    `window` restricts sampling to a per-item axis-aligned sub-rectangle
    (y0, x0, height, width); taps are edge-clamped inside it, which fuses
    crop and resize without a separate copy.
    """
    b, h, w, _ = arr.shape
    if window is None:
        wy0 = np.zeros(b)
        wx0 = np.zeros(b)
        wh = np.full(b, float(h))
        ww = np.full(b, float(w))
    else:
        wy0, wx0, wh, ww = (np.asarray(v, dtype=np.float64) for v in window)

    ys = (np.arange(out_h, dtype=np.float64) + 0.5)[None, :] * (wh / out_h)[:, None] \
        - 0.5 + wy0[:, None]
    xs = (np.arange(out_w, dtype=np.float64) + 0.5)[None, :] * (ww / out_w)[:, None] \
        - 0.5 + wx0[:, None]
    ys = np.clip(ys, wy0[:, None], (wy0 + wh - 1)[:, None])
    xs = np.clip(xs, wx0[:, None], (wx0 + ww - 1)[:, None])

    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[:, :, None]
    fx = (xs - x0)[:, None, :]
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    y1i = np.minimum(y0i + 1, (wy0 + wh - 1).astype(np.int64)[:, None])
    x1i = np.minimum(x0i + 1, (wx0 + ww - 1).astype(np.int64)[:, None])

    c = arr.shape[3]
    base = (np.arange(b, dtype=np.int64) * h)[:, None]
    ya = ((base + y0i) * w)[:, :, None]
    yb = ((base + y1i) * w)[:, :, None]
    xa = x0i[:, None, :]
    xb = x1i[:, None, :]
    i00 = ya + xa
    i01 = ya + xb
    i10 = yb + xa
    i11 = yb + xb
    planes = np.ascontiguousarray(arr.transpose(3, 0, 1, 2)).reshape(c, -1)
    out = np.empty((b, out_h, out_w, c), dtype=np.float64)
    for ch in range(c):
        pl = planes[ch]
        v00 = np.take(pl, i00).astype(np.float64, copy=False)
        v01 = np.take(pl, i01).astype(np.float64, copy=False)
        v10 = np.take(pl, i10).astype(np.float64, copy=False)
        v11 = np.take(pl, i11).astype(np.float64, copy=False)
        out[..., ch] = (1 - fy) * ((1 - fx) * v00 + fx * v01) \
            + fy * ((1 - fx) * v10 + fx * v11)
    return _quantize(out) if quantize else out


def _reduce_resolution_kernel(arr: np.ndarray, rates: np.ndarray) -> np.ndarray:
    b, h, w, c = arr.shape
    sub_h = np.ceil(rates * h).astype(np.int64)
    sub_w = np.ceil(rates * w).astype(np.int64)
    # downscale into the top-left of a shared buffer (per-item sizes differ),
    # then upscale back out of each item's valid window
    zeros = np.zeros(b)
    down = _resize_from_counts(arr, sub_h, sub_w, h, w)
    return _resize_kernel(down, h, w,
                          window=(zeros, zeros, sub_h.astype(np.float64),
                                  sub_w.astype(np.float64)))


def _resize_from_counts(arr, sub_h, sub_w, buf_h, buf_w):
    """Downscale each item i to sub_h[i] x sub_w[i], stored top-left in a
    (buf_h, buf_w) float buffer; cells beyond an item's window are unused."""
    b, h, w, c = arr.shape
    ys = (np.arange(buf_h, dtype=np.float64)[None, :] + 0.5) * (h / sub_h)[:, None] - 0.5
    xs = (np.arange(buf_w, dtype=np.float64)[None, :] + 0.5) * (w / sub_w)[:, None] - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[:, :, None]
    fx = (xs - x0)[:, None, :]
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    y1i = np.minimum(y0i + 1, h - 1)
    x1i = np.minimum(x0i + 1, w - 1)
    base = (np.arange(b, dtype=np.int64) * h)[:, None]
    ya = ((base + y0i) * w)[:, :, None]
    yb = ((base + y1i) * w)[:, :, None]
    xa, xb = x0i[:, None, :], x1i[:, None, :]
    planes = np.ascontiguousarray(arr.transpose(3, 0, 1, 2)).reshape(c, -1)
    out = np.empty((b, buf_h, buf_w, c), dtype=np.float64)
    for ch in range(c):
        pl = planes[ch]
        v00 = np.take(pl, ya + xa).astype(np.float64, copy=False)
        v01 = np.take(pl, ya + xb).astype(np.float64, copy=False)
        v10 = np.take(pl, yb + xa).astype(np.float64, copy=False)
        v11 = np.take(pl, yb + xb).astype(np.float64, copy=False)
        out[..., ch] = (1 - fy) * ((1 - fx) * v00 + fx * v01) \
            + fy * ((1 - fx) * v10 + fx * v11)
    return out


def _rgb_to_hsv(rgb: np.ndarray):
    """8-bit-scale HSV: H in [0, 180), S and V in [0, 255]. Max-channel ties
    resolve in R, G, B priority order."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = v - mn
    dd = np.where(d > 0, d, 1.0)
    s = np.where(v > 0, 255.0 * d / np.where(v > 0, v, 1.0), 0.0)
    h = np.where(
        v == r,
        np.mod(30.0 * (g - b) / dd, 180.0),
        np.where(v == g, 60.0 + 30.0 * (b - r) / dd, 120.0 + 30.0 * (r - g) / dd),
    )
    h = np.where(d > 0, h, 0.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = np.where(h >= 180.0, h - 180.0, np.where(h < 0.0, h + 180.0, h))
    h6 = h / 30.0
    sector = np.floor(h6)
    f = h6 - sector
    idx = sector.astype(np.int64) % 6
    sn = s / 255.0
    p = v * (1.0 - sn)
    q = v * (1.0 - f * sn)
    t = v * (1.0 - (1.0 - f) * sn)
    r = np.choose(idx, [v, q, p, p, t, v])
    g = np.choose(idx, [t, v, v, q, p, p])
    b = np.choose(idx, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _hue_kernel(arr: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    h, s, v = _rgb_to_hsv(arr.astype(np.float64))
    h = np.mod(h + deltas[:, None, None], 180.0)
    h = np.where(h >= 180.0, 0.0, h)  # float mod can land exactly on 180
    return _quantize(_hsv_to_rgb(h, s, v))


def _saturation_kernel(arr: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    h, s, v = _rgb_to_hsv(arr.astype(np.float64))
    s = np.clip(s + deltas[:, None, None], 0.0, 255.0)
    return _quantize(_hsv_to_rgb(h, s, v))


def _brightness_kernel(arr, scales, biases):
    x = arr.astype(np.float64) * scales[:, None, None, None] + biases[:, None, None, None]
    return _quantize(x)


def _noise_kernel(arr: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return _quantize(arr.astype(np.float64) + noise)


def _cutout_rect_sides(h: int, w: int, frac: float) -> tuple[int, int]:
    return math.ceil(frac * h), math.ceil(frac * w)


# ---------------------------------------------------------------------------
# public single-image operations


def rotate(img: Image, degrees: float) -> Image:
    """Rotate around the image center with bilinear sampling; uncovered
    pixels are filled with mid-gray 128."""
    if not math.isfinite(degrees):
        raise ValueError(f"rotation angle must be finite, got {degrees}")
    out = _rotate_kernel(img.pixels[None], np.array([degrees], dtype=np.float64))
    return Image(out[0])


def gaussian_noise(img: Image, sigma: float, rng: RngStream) -> Image:
    """Add independent N(0, sigma^2) noise per sample, then quantize."""
    if not (math.isfinite(sigma) and sigma >= 0):
        raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
    noise = rng.generator().normal(0.0, sigma, size=img.pixels.shape)
    return Image(_noise_kernel(img.pixels[None], noise[None])[0])


def _draw_crop_window(gen: np.random.Generator, h: int, w: int, cr_min: float):
    r = gen.uniform(cr_min, 1.0)
    side = int(np.clip(round(r * min(h, w)), 1, min(h, w)))
    y0 = int(gen.integers(0, h - side + 1))
    x0 = int(gen.integers(0, w - side + 1))
    return side, y0, x0


def crop_resize(img: Image, rng: RngStream, cr_min: float, out_side: int) -> Image:
    """Crop a random square with side fraction in [cr_min, 1] of the shorter
    side, uniformly positioned, and bilinearly resize it to out_side."""
    if not (0.0 < cr_min <= 1.0):
        raise ValueError(f"cr_min must be in (0, 1], got {cr_min}")
    if out_side < 1:
        raise ValueError(f"out_side must be >= 1, got {out_side}")
    side, y0, x0 = _draw_crop_window(rng.generator(), img.height, img.width, cr_min)
    out = _resize_kernel(
        img.pixels[None], out_side, out_side,
        window=(np.array([y0]), np.array([x0]),
                np.array([side], dtype=np.float64), np.array([side], dtype=np.float64)),
    )
    return Image(out[0])


def reduce_resolution(img: Image, rate: float) -> Image:
    """Bilinearly downscale to ceil(rate * dim) per axis, then upscale back."""
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    out = _reduce_resolution_kernel(img.pixels[None], np.array([rate], dtype=np.float64))
    return Image(out[0])


def adjust_hue(img: Image, delta: float) -> Image:
    """Shift hue by delta on the [0, 180) scale (wraps); S and V unchanged."""
    if img.channels != 3:
        raise ValueError("hue adjustment requires a 3-channel image")
    return Image(_hue_kernel(img.pixels[None], np.array([delta], dtype=np.float64))[0])


def adjust_saturation(img: Image, delta: float) -> Image:
    """Shift saturation by delta, clamped to [0, 255]; -255 forces grayscale."""
    if img.channels != 3:
        raise ValueError("saturation adjustment requires a 3-channel image")
    return Image(
        _saturation_kernel(img.pixels[None], np.array([delta], dtype=np.float64))[0]
    )


def adjust_brightness(img: Image, scale: float, bias: float) -> Image:
    """Per-sample v <- clamp(round(scale * v + bias), 0, 255)."""
    if not (math.isfinite(scale) and scale >= 0):
        raise ValueError(f"scale must be finite and >= 0, got {scale}")
    return Image(
        _brightness_kernel(
            img.pixels[None],
            np.array([scale], dtype=np.float64),
            np.array([bias], dtype=np.float64),
        )[0]
    )


def _draw_cutout_rects(gen, h, w, count_range, frac):
    k = int(gen.integers(count_range[0], count_range[1] + 1))
    rh, rw = _cutout_rect_sides(h, w, frac)
    rects = []
    for _ in range(k):
        y = int(gen.integers(0, h - rh + 1))
        x = int(gen.integers(0, w - rw + 1))
        rects.append((y, x))
    return rects, rh, rw


def cutout(img: Image, rng: RngStream, count_range: tuple[int, int], frac: float) -> Image:
    """Fill k ~ U{count_range} random rectangles (ceil(frac * dim) per side)
    with gray 128."""
    if not (0.0 < frac < 1.0):
        raise ValueError(f"frac must be in (0, 1), got {frac}")
    if not (0 <= count_range[0] <= count_range[1]):
        raise ValueError(f"invalid count range {count_range}")
    rects, rh, rw = _draw_cutout_rects(
        rng.generator(), img.height, img.width, count_range, frac
    )
    out = img.pixels.copy()
    for y, x in rects:
        out[y:y + rh, x:x + rw, :] = 128
    return Image(out)


def hflip(img: Image) -> Image:
    """Mirror left-right."""
    return Image(np.ascontiguousarray(img.pixels[:, ::-1, :]))


# ---------------------------------------------------------------------------
# pipeline: parameter draws + batched application


@dataclass
class _Draw:
    # all random decisions for one augmented item, drawn upfront in op order
    angle: float | None = None
    crop: tuple[int, int, int] | None = None  # (side, y0, x0)
    res_rate: float | None = None
    hue_d: float | None = None
    sat_d: float | None = None
    bright: tuple[float, float] | None = None  # (scale, bias)
    noise: np.ndarray | None = None  # (out, out, C) float64
    rects: list[tuple[int, int]] | None = None
    flip: bool = False


def _draw_params(cfg: AugmentConfig, gen: np.random.Generator,
                 h: int, w: int, c: int, frame: tuple[int, int] | None = None) -> _Draw:
    # `frame` is the image size at the noise/cutout stage: out_side squared
    # for the standard pipeline, the native size for full-frame augmentation
    fh, fw = (cfg.out_side, cfg.out_side) if frame is None else frame
    d = _Draw()
    en = cfg.enabled
    if en.rotation:
        d.angle = gen.uniform(*cfg.rotation_deg)
    if en.crop:
        d.crop = _draw_crop_window(gen, h, w, cfg.crop_rate_min)
    if en.resolution:
        d.res_rate = gen.uniform(*cfg.resolution_rate)
    if en.hue:
        d.hue_d = gen.uniform(*cfg.hue_delta)
    if en.saturation:
        d.sat_d = gen.uniform(*cfg.saturation_delta)
    if en.brightness:
        d.bright = (gen.uniform(*cfg.brightness_scale), gen.uniform(*cfg.brightness_bias))
    if en.noise:
        sigma = gen.uniform(0.0, cfg.noise_sigma)
        d.noise = gen.normal(0.0, sigma, size=(fh, fw, c))
    if en.cutout:
        d.rects, _, _ = _draw_cutout_rects(gen, fh, fw, cfg.cutout_count, cfg.cutout_frac)
    if en.hflip:
        d.flip = bool(gen.uniform() < cfg.hflip_prob)
    return d


def _apply_pipeline(arr: np.ndarray, cfg: AugmentConfig, draws: list[_Draw],
                    resize_stage: bool = True) -> np.ndarray:
    """Run the fixed op order on a stack of same-shape items.

    Order: rotate, crop+resize (or plain resize to out_side when cropping is
    disabled), resolution reduction, hue, saturation, brightness, noise,
    cutout, horizontal flip. With resize_stage=False the crop/resize step is
    skipped entirely and items keep their native size.
    """
    b, h, w, c = arr.shape
    en = cfg.enabled
    out = cfg.out_side

    if en.rotation:
        arr = _rotate_kernel(arr, np.array([d.angle for d in draws], dtype=np.float64))
    if resize_stage:
        if en.crop:
            side = np.array([d.crop[0] for d in draws], dtype=np.float64)
            y0 = np.array([d.crop[1] for d in draws], dtype=np.float64)
            x0 = np.array([d.crop[2] for d in draws], dtype=np.float64)
            arr = _resize_kernel(arr, out, out, window=(y0, x0, side, side))
        elif (h, w) != (out, out):
            arr = _resize_kernel(arr, out, out)
    if en.resolution:
        arr = _reduce_resolution_kernel(
            arr, np.array([d.res_rate for d in draws], dtype=np.float64)
        )
    if en.hue:
        if c != 3:
            raise ValueError("hue adjustment requires a 3-channel image")
        arr = _hue_kernel(arr, np.array([d.hue_d for d in draws], dtype=np.float64))
    if en.saturation:
        if c != 3:
            raise ValueError("saturation adjustment requires a 3-channel image")
        arr = _saturation_kernel(arr, np.array([d.sat_d for d in draws], dtype=np.float64))
    if en.brightness:
        arr = _brightness_kernel(
            arr,
            np.array([d.bright[0] for d in draws], dtype=np.float64),
            np.array([d.bright[1] for d in draws], dtype=np.float64),
        )
    if en.noise:
        arr = _noise_kernel(arr, np.stack([d.noise for d in draws]))
    if en.cutout:
        rh, rw = _cutout_rect_sides(arr.shape[1], arr.shape[2], cfg.cutout_frac)
        arr = arr.copy()
        for i, d in enumerate(draws):
            for y, x in d.rects:
                arr[i, y:y + rh, x:x + rw, :] = 128
    if en.hflip:
        flips = np.array([d.flip for d in draws], dtype=bool)
        if flips.any():
            arr = np.where(flips[:, None, None, None], arr[:, :, ::-1, :], arr)
    return arr


def augment_once(img: Image, cfg: AugmentConfig, rng: RngStream) -> Image:
    """Apply the full enabled pipeline to one image; output side is cfg.out_side."""
    draw = _draw_params(cfg, rng.generator(), img.height, img.width, img.channels)
    out = _apply_pipeline(img.pixels[None], cfg, [draw])
    return Image(out[0])


def augment_full_frame(img: Image, cfg: AugmentConfig, rng: RngStream) -> Image:
    """Apply the enabled ops at the image's native size, skipping the
    crop/resize stage; noise and cutout geometry use the native frame.
    Used by the pair-retrieval protocol, which augments without cropping."""
    draw = _draw_params(
        cfg, rng.generator(), img.height, img.width, img.channels,
        frame=(img.height, img.width),
    )
    out = _apply_pipeline(img.pixels[None], cfg, [draw], resize_stage=False)
    return Image(out[0])


def build_batch(sources: list[Image], m: int, cfg: AugmentConfig, rng: RngStream) -> Batch:
    """Augment each of N sources m times; item (i, j) uses stream rng.derive(i, j).

    Items of equal source shape are processed through one vectorized pass,
    which is bit-identical to calling augment_once per item.
    """
    n = len(sources)
    if n < 2:
        raise ValueError(f"need at least 2 sources for a batch, got {n}")
    if m < 1:
        raise ValueError(f"augmentations per source must be >= 1, got {m}")

    draws: list[_Draw] = []
    for i, src in enumerate(sources):
        for j in range(m):
            gen = rng.derive(i, j).generator()
            draws.append(_draw_params(cfg, gen, src.height, src.width, src.channels))

    items: list[Image | None] = [None] * (n * m)
    groups: dict[tuple[int, int, int], list[int]] = {}
    for i, src in enumerate(sources):
        key = (src.height, src.width, src.channels)
        groups.setdefault(key, []).extend(range(i * m, (i + 1) * m))
    for idx_list in groups.values():
        arr = np.stack([sources[k // m].pixels for k in idx_list])
        out = _apply_pipeline(arr, cfg, [draws[k] for k in idx_list])
        for row, k in enumerate(idx_list):
            items[k] = Image(np.ascontiguousarray(out[row]))

    return Batch(sources=list(range(n)), items=items, n_sources=n, per_source=m)
