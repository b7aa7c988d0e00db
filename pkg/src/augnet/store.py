"""Persistence: checkpoints, embedding stores, datasets, run configs.

Three little-endian binary containers, each with a 4-byte magic and a u32
version so stale or foreign files fail loudly:

  AUGC  checkpoint: JSON header (spec, step, loss kind, seed, blob flags)
        followed by f32 parameter / Adam moment / batch-norm stat blobs
  AUGE  embedding store: count, dim, f32 row-major matrix, trailing JSON
        id manifest
  AUGT  packed image dataset: count, height, width, channels, u8 rasters

Every malformed-input class maps to a distinct StoreError subclass; writers
go through a temp file plus rename so readers never observe partial files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import AugmentConfig, Image, OpToggles
from .encoder import (
    EncoderSpec, EncoderState, TrainConfig, bn_layout, param_count, param_layout,
)
from .evalkit import RetrievalIndex

__all__ = [
    "StoreError",
    "BadMagicError",
    "TruncatedFileError",
    "VersionMismatchError",
    "SchemaError",
    "ConfigError",
    "RunConfig",
    "save_checkpoint",
    "load_checkpoint",
    "save_embeddings",
    "load_embeddings",
    "save_packed_dataset",
    "load_dataset",
    "load_dataset_with_ids",
    "save_image",
    "parse_config",
    "serialize_config",
    "default_config",
]

_CKPT_MAGIC = b"AUGC"
_EMB_MAGIC = b"AUGE"
_DATA_MAGIC = b"AUGT"
_VERSION = 1


class StoreError(Exception):
    """Base class for all persistence failures."""


class BadMagicError(StoreError):
    pass


class TruncatedFileError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class SchemaError(StoreError):
    pass


class ConfigError(StoreError):
    pass


def _atomic_write(path, data: bytes):
    p = Path(path)
    tmp = p.with_name(p.name + f".tmp.{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, p)
    finally:
        if tmp.exists():
            tmp.unlink(missing_ok=True)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.off}, have {len(self.data) - self.off})"
            )
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def remaining(self) -> bytes:
        out = self.data[self.off:]
        self.off = len(self.data)
        return out

    def expect_end(self):
        if self.off != len(self.data):
            raise SchemaError(
                f"{self.path}: {len(self.data) - self.off} trailing bytes after payload"
            )


def _check_magic(r: _Reader, magic: bytes):
    got = r.take(4, "magic")
    if got != magic:
        raise BadMagicError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32("version")
    if version != _VERSION:
        raise VersionMismatchError(
            f"{r.path}: format version {version}, this build reads {_VERSION}"
        )


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _f32_from(buf: bytes, count: int, path, what: str) -> np.ndarray:
    arr = np.frombuffer(buf, dtype="<f4", count=count)
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: EncoderState, path, *, include_moments: bool = True):
    """Write an AUGC checkpoint; parameters are stored as f32."""
    spec = state.spec
    header = {
        "spec": {
            "n_blocks": spec.n_blocks, "in_side": spec.in_side,
            "in_channels": spec.in_channels, "block_channels": spec.block_channels,
            "embed_dim": spec.embed_dim, "seed": spec.seed,
        },
        "step": int(state.step),
        "loss_kind": state.meta.get("loss_kind"),
        "seed": state.meta.get("seed"),
        "has_moments": bool(include_moments),
        "has_bn_stats": True,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        _CKPT_MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<I", len(hbytes)),
        hbytes,
        _f32_bytes(state.params),
    ]
    if include_moments:
        parts.append(_f32_bytes(state.adam_m))
        parts.append(_f32_bytes(state.adam_v))
    parts.append(_f32_bytes(state.bn_stats))
    _atomic_write(path, b"".join(parts))


def _header_field(header: dict, key: str, types, path):
    if key not in header:
        raise SchemaError(f"{path}: checkpoint header missing {key!r}")
    val = header[key]
    if not isinstance(val, types):
        raise SchemaError(f"{path}: checkpoint header field {key!r} has wrong type")
    return val


def load_checkpoint(path) -> EncoderState:
    r = _Reader(Path(path).read_bytes(), path)
    _check_magic(r, _CKPT_MAGIC)
    hlen = r.u32("header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: undecodable checkpoint header: {e}") from None
    if not isinstance(header, dict):
        raise SchemaError(f"{path}: checkpoint header is not a JSON object")

    spec_doc = _header_field(header, "spec", dict, path)
    known = {"n_blocks", "in_side", "in_channels", "block_channels", "embed_dim", "seed"}
    extra = set(spec_doc) - known
    if extra or set(spec_doc) != known:
        raise SchemaError(f"{path}: checkpoint spec keys {sorted(spec_doc)} invalid")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in spec_doc.values()):
        raise SchemaError(f"{path}: checkpoint spec fields must be integers")
    try:
        spec = EncoderSpec(**spec_doc)
    except ValueError as e:
        raise SchemaError(f"{path}: invalid encoder spec in header: {e}") from None

    step = _header_field(header, "step", int, path)
    has_moments = _header_field(header, "has_moments", bool, path)
    has_bn = _header_field(header, "has_bn_stats", bool, path)

    n = param_count(spec)
    params = _f32_from(r.take(4 * n, "parameter blob"), n, path, "params")
    if has_moments:
        m = _f32_from(r.take(4 * n, "Adam m blob"), n, path, "m")
        v = _f32_from(r.take(4 * n, "Adam v blob"), n, path, "v")
    else:
        m = np.zeros(n, dtype=np.float32)
        v = np.zeros(n, dtype=np.float32)
    nb = sum(int(np.prod(s)) for _, s in bn_layout(spec))
    if has_bn:
        bn = _f32_from(r.take(4 * nb, "batch-norm stats blob"), nb, path, "bn")
    else:
        bn = np.zeros(nb, dtype=np.float32)
        _views_fill_var_ones(bn, spec)
    r.expect_end()
    if not np.all(np.isfinite(params)):
        raise SchemaError(f"{path}: non-finite parameter values")
    return EncoderState(
        spec=spec, params=params.copy(), adam_m=m.copy(), adam_v=v.copy(),
        step=step, bn_stats=bn.copy(),
        meta={"loss_kind": header.get("loss_kind"), "seed": header.get("seed")},
    )


def _views_fill_var_ones(bn: np.ndarray, spec: EncoderSpec):
    off = 0
    for name, shape in bn_layout(spec):
        size = int(np.prod(shape))
        if name.endswith(".var"):
            bn[off:off + size] = 1.0
        off += size


# ---------------------------------------------------------------------------
# embedding stores


def save_embeddings(ids, matrix, path):
    """Write an AUGE store; |ids| must equal the number of matrix rows."""
    mat = np.asarray(matrix)
    if mat.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {mat.shape}")
    ids = list(ids)
    if len(ids) != mat.shape[0]:
        raise ValueError(f"{len(ids)} ids for {mat.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    manifest = json.dumps(ids).encode("utf-8")
    payload = b"".join([
        _EMB_MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<I", mat.shape[0]),
        struct.pack("<I", mat.shape[1]),
        _f32_bytes(mat),
        manifest,
    ])
    _atomic_write(path, payload)


def load_embeddings(path) -> RetrievalIndex:
    r = _Reader(Path(path).read_bytes(), path)
    _check_magic(r, _EMB_MAGIC)
    count = r.u32("count")
    dim = r.u32("dim")
    blob = r.take(4 * count * dim, "embedding matrix")
    mat = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(count, dim)
    manifest = r.remaining()
    if not manifest:
        raise TruncatedFileError(f"{path}: missing id manifest")
    try:
        ids = json.loads(manifest.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: undecodable id manifest: {e}") from None
    if not isinstance(ids, list):
        raise SchemaError(f"{path}: id manifest is not a list")
    if len(ids) != count:
        raise SchemaError(f"{path}: manifest has {len(ids)} ids, header says {count}")
    ids = [tuple(i) if isinstance(i, list) else i for i in ids]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate ids in manifest")
    return RetrievalIndex(ids=ids, vectors=mat)


# ---------------------------------------------------------------------------
# datasets


def save_packed_dataset(images, path):
    """Write an AUGT file; all images must share one shape."""
    images = list(images)
    if not images:
        raise ValueError("no images to pack")
    shape = images[0].pixels.shape
    if any(im.pixels.shape != shape for im in images):
        raise ValueError("packed datasets require uniform image shapes")
    h, w, c = shape
    payload = b"".join(
        [
            _DATA_MAGIC,
            struct.pack("<IIIII", _VERSION, len(images), h, w, c),
        ]
        + [im.pixels.tobytes() for im in images]
    )
    _atomic_write(path, payload)


def save_image(img: Image, path):
    """Write a single image as PNG (via Pillow)."""
    from PIL import Image as PILImage

    px = img.pixels
    if px.shape[2] == 1:
        PILImage.fromarray(px[:, :, 0], mode="L").save(path, format="PNG")
    else:
        PILImage.fromarray(px, mode="RGB").save(path, format="PNG")


def _load_image_file(path) -> Image:
    from PIL import Image as PILImage, UnidentifiedImageError

    try:
        with PILImage.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise SchemaError(f"undecodable image {path}: {e}") from None
    return Image(arr)


def load_dataset_with_ids(path) -> tuple[list, list[Image]]:
    """Like load_dataset, also returning stable per-image ids: filenames for
    a directory, row indices for a packed file."""
    p = Path(path)
    if p.is_dir():
        names = [
            f for f in os.listdir(p)
            if f.lower().endswith((".png", ".jpg", ".jpeg"))
        ]
        names.sort(key=lambda s: s.encode("utf-8"))
        return names, [_load_image_file(p / name) for name in names]

    r = _Reader(p.read_bytes(), path)
    _check_magic(r, _DATA_MAGIC)
    count = r.u32("count")
    h = r.u32("height")
    w = r.u32("width")
    c = r.u32("channels")
    if c not in (1, 3) or h < 1 or w < 1:
        raise SchemaError(f"{path}: invalid raster shape ({h}, {w}, {c})")
    out = []
    for i in range(count):
        raw = r.take(h * w * c, f"raster {i}")
        out.append(Image(np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).copy()))
    r.expect_end()
    return list(range(count)), out


def load_dataset(path) -> list[Image]:
    """Load a directory of PNG/JPEG files (byte-wise filename order) or an
    AUGT packed file."""
    return load_dataset_with_ids(path)[1]


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs: architecture plus train settings
    (the augmentation config rides inside train.augment)."""

    spec: EncoderSpec
    train: TrainConfig


_NUM = (int, float)

# (json key, python attr, kind) per section; kind drives type checking
_SPEC_FIELDS = [
    ("n_blocks", "int"), ("in_side", "int"), ("in_channels", "int"),
    ("block_channels", "int"), ("embed_dim", "int"), ("seed", "int"),
]
_TRAIN_FIELDS = [
    ("n_sources_per_batch", "int"), ("augments_per_source", "int"),
    ("steps", "int"), ("lr", "num"), ("loss_kind", "str"), ("seed", "int"),
    ("checkpoint_every", "int"),
]
_AUG_FIELDS = [
    ("rotation_deg", "pair"), ("noise_sigma", "num"), ("crop_rate_min", "num"),
    ("resolution_rate", "pair"), ("hue_delta", "pair"), ("saturation_delta", "pair"),
    ("brightness_scale", "pair"), ("brightness_bias", "pair"),
    ("cutout_count", "ipair"), ("cutout_frac", "num"), ("hflip_prob", "num"),
    ("out_side", "int"),
]
_TOGGLE_KEYS = [
    "rotation", "noise", "crop", "resolution", "hue", "saturation",
    "brightness", "cutout", "hflip",
]


def _coerce(value, kind, path):
    if kind == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind == "num":
        if not isinstance(value, _NUM) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if kind in ("pair", "ipair"):
        ok = (
            isinstance(value, list) and len(value) == 2
            and all(isinstance(v, _NUM) and not isinstance(v, bool) for v in value)
        )
        if kind == "ipair":
            ok = ok and all(isinstance(v, int) for v in value)
        if not ok:
            raise ConfigError(f"{path}: expected a 2-element number list, got {value!r}")
        return tuple(value) if kind == "ipair" else (float(value[0]), float(value[1]))
    raise AssertionError(kind)


def _section(doc: dict, name: str, fields, path) -> dict:
    sub = doc.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{name}: expected an object, got {sub!r}")
    known = {k for k, _ in fields}
    kwargs = {}
    for key, val in sub.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        kind = dict(fields)[key]
        kwargs[key] = _coerce(val, kind, f"{name}.{key}")
    return kwargs


def parse_config(text: str) -> RunConfig:
    """Parse a JSON run config; omitted fields take the standard defaults.

    Unknown keys, type mismatches and invariant violations all raise
    ConfigError naming the offending JSON path.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for key in doc:
        if key not in ("spec", "train", "augment"):
            raise ConfigError(f"{key}: unknown key")

    spec_kw = _section(doc, "spec", _SPEC_FIELDS, "spec")
    try:
        spec = EncoderSpec(**spec_kw)
    except ValueError as e:
        raise ConfigError(f"spec: {e}") from None

    aug_doc = doc.get("augment", {})
    if not isinstance(aug_doc, dict):
        raise ConfigError(f"augment: expected an object, got {aug_doc!r}")
    toggles_doc = aug_doc.get("enabled", {})
    if not isinstance(toggles_doc, dict):
        raise ConfigError(f"augment.enabled: expected an object, got {toggles_doc!r}")
    toggle_kw = {}
    for key, val in toggles_doc.items():
        if key not in _TOGGLE_KEYS:
            raise ConfigError(f"augment.enabled.{key}: unknown key")
        toggle_kw[key] = _coerce(val, "bool", f"augment.enabled.{key}")
    aug_kw = _section(
        {"augment": {k: v for k, v in aug_doc.items() if k != "enabled"}},
        "augment", _AUG_FIELDS, "augment",
    )
    try:
        augment = AugmentConfig(enabled=OpToggles(**toggle_kw), **aug_kw)
    except ValueError as e:
        raise ConfigError(f"augment: {e}") from None

    train_kw = _section(doc, "train", _TRAIN_FIELDS, "train")
    train_kw.setdefault("n_sources_per_batch", 1024)
    train_kw.setdefault("augments_per_source", 8)
    train_kw.setdefault("steps", 1000)
    try:
        train = TrainConfig(augment=augment, **train_kw)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    return RunConfig(spec=spec, train=train)


def default_config() -> RunConfig:
    """The all-defaults RunConfig (same as parsing an empty JSON object)."""
    return parse_config("{}")


def serialize_config(cfg: RunConfig) -> str:
    """Inverse of parse_config: parse(serialize(cfg)) == cfg."""
    aug = cfg.train.augment
    doc = {
        "spec": {
            "n_blocks": cfg.spec.n_blocks, "in_side": cfg.spec.in_side,
            "in_channels": cfg.spec.in_channels,
            "block_channels": cfg.spec.block_channels,
            "embed_dim": cfg.spec.embed_dim, "seed": cfg.spec.seed,
        },
        "train": {
            "n_sources_per_batch": cfg.train.n_sources_per_batch,
            "augments_per_source": cfg.train.augments_per_source,
            "steps": cfg.train.steps, "lr": cfg.train.lr,
            "loss_kind": cfg.train.loss_kind, "seed": cfg.train.seed,
            "checkpoint_every": cfg.train.checkpoint_every,
        },
        "augment": {
            "rotation_deg": list(aug.rotation_deg),
            "noise_sigma": aug.noise_sigma,
            "crop_rate_min": aug.crop_rate_min,
            "resolution_rate": list(aug.resolution_rate),
            "hue_delta": list(aug.hue_delta),
            "saturation_delta": list(aug.saturation_delta),
            "brightness_scale": list(aug.brightness_scale),
            "brightness_bias": list(aug.brightness_bias),
            "cutout_count": list(aug.cutout_count),
            "cutout_frac": aug.cutout_frac,
            "hflip_prob": aug.hflip_prob,
            "out_side": aug.out_side,
            "enabled": {k: getattr(aug.enabled, k) for k in _TOGGLE_KEYS},
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)
