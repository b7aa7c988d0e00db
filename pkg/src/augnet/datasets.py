"""Procedural image and point-set generators for tests and demos.

Four texture families (sinusoid gratings, checkerboards, Gaussian blobs,
blocky color patches) give small corpora with enough per-source structure
that augmentation-identity training has something to learn, without shipping
binary fixtures. Everything is deterministic in the seed.

Each family splits into a parameter draw and a renderer so that
`make_grouped_textures` can render near-duplicate variants of one base
parameter set; the plain corpus functions compose the two with a single
RNG stream.
"""

from __future__ import annotations

import numpy as np

from .imaging import Image, RngStream, _resize_kernel

__all__ = [
    "make_texture_images", "make_labeled_textures", "make_grouped_textures",
    "make_blobs",
]


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr + 0.5), 0.0, 255.0).astype(np.uint8)


def _tint_render(corners: np.ndarray, side: int) -> np.ndarray:
    # smooth per-source color gradient: a stable global signature that
    # survives crops, flips and moderate color jitter
    t = np.linspace(0.0, 1.0, side)
    top = corners[0, 0][None, :] * (1.0 - t)[:, None] + corners[0, 1][None, :] * t[:, None]
    bot = corners[1, 0][None, :] * (1.0 - t)[:, None] + corners[1, 1][None, :] * t[:, None]
    return top[None, :, :] * (1.0 - t)[:, None, None] + bot[None, :, :] * t[:, None, None]


# --- gratings: two superposed color sinusoids ------------------------------

def _grating_params(gen: np.random.Generator, side: int) -> dict:
    return {
        "f1": gen.uniform(1.0, 6.0, size=2),
        "p1": gen.uniform(0.0, 2 * np.pi),
        "f2": gen.uniform(4.0, 12.0, size=2),
        "p2": gen.uniform(0.0, 2 * np.pi),
        "c1": gen.integers(0, 256, size=3).astype(np.float64),
        "c2": gen.integers(0, 256, size=3).astype(np.float64),
    }


def _grating_render(p: dict, side: int, gen: np.random.Generator) -> np.ndarray:
    y, x = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    t = 0.65 * np.sin(2 * np.pi * (p["f1"][0] * x + p["f1"][1] * y) / side + p["p1"])
    t = 0.5 * (1.0 + t + 0.35 * np.sin(
        2 * np.pi * (p["f2"][0] * x + p["f2"][1] * y) / side + p["p2"]))
    return p["c1"] + t[:, :, None] * (p["c2"] - p["c1"])


def _grating_perturb(p: dict, gen: np.random.Generator, s: float, side: int) -> dict:
    return {
        "f1": p["f1"] * (1.0 + s * gen.uniform(-0.10, 0.10, size=2)),
        "p1": p["p1"] + s * gen.uniform(-1.2, 1.2),
        "f2": p["f2"] * (1.0 + s * gen.uniform(-0.10, 0.10, size=2)),
        "p2": p["p2"] + s * gen.uniform(-1.2, 1.2),
        "c1": p["c1"] + s * gen.uniform(-45.0, 45.0, size=3),
        "c2": p["c2"] + s * gen.uniform(-45.0, 45.0, size=3),
    }


# --- checkerboards: jittered two-color lattice -----------------------------

def _checker_params(gen: np.random.Generator, side: int) -> dict:
    cell = int(gen.integers(4, max(6, side // 4)))
    oy, ox = gen.integers(0, cell, size=2)
    return {
        "cell": cell, "oy": int(oy), "ox": int(ox),
        "c1": gen.integers(0, 256, size=3).astype(np.float64),
        "c2": gen.integers(0, 256, size=3).astype(np.float64),
        # fixed per-cell brightness fingerprint on top of the lattice
        "jitter": gen.normal(0.0, 12.0, size=(side // 2 + 2, side // 2 + 2)),
    }


def _checker_render(p: dict, side: int, gen: np.random.Generator) -> np.ndarray:
    y, x = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    cy = (y + p["oy"]) // p["cell"]
    cx = (x + p["ox"]) // p["cell"]
    mask = ((cy + cx) % 2).astype(np.float64)
    img = p["c1"] + mask[:, :, None] * (p["c2"] - p["c1"])
    n = p["jitter"].shape[0]
    img += p["jitter"][cy % n, cx % n][:, :, None]
    img += gen.normal(0.0, 8.0, size=img.shape)
    return img


def _checker_perturb(p: dict, gen: np.random.Generator, s: float, side: int) -> dict:
    shift = np.rint(s * gen.uniform(-0.6, 0.6, size=2) * p["cell"]).astype(int)
    return {
        "cell": p["cell"],
        "oy": (p["oy"] + int(shift[0])) % p["cell"],
        "ox": (p["ox"] + int(shift[1])) % p["cell"],
        "c1": p["c1"] + s * gen.uniform(-45.0, 45.0, size=3),
        "c2": p["c2"] + s * gen.uniform(-45.0, 45.0, size=3),
        "jitter": p["jitter"] + gen.normal(0.0, 10.0 * s, size=p["jitter"].shape),
    }


# --- blob fields: Gaussian bumps on a dark ground --------------------------

def _blob_params(gen: np.random.Generator, side: int) -> dict:
    base = gen.integers(0, 96, size=3).astype(np.float64)
    blobs = []
    for _ in range(int(gen.integers(5, 10))):
        cy, cx = gen.uniform(0, side, size=2)
        sigma = gen.uniform(side / 14, side / 4)
        color = gen.integers(64, 256, size=3).astype(np.float64)
        blobs.append({"cy": cy, "cx": cx, "sigma": sigma, "color": color})
    return {"base": base, "blobs": blobs}


def _blob_render(p: dict, side: int, gen: np.random.Generator) -> np.ndarray:
    y, x = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    img = np.tile(p["base"], (side, side, 1))
    for b in p["blobs"]:
        bump = np.exp(-((y - b["cy"]) ** 2 + (x - b["cx"]) ** 2)
                      / (2 * b["sigma"] * b["sigma"]))
        img += bump[:, :, None] * b["color"]
    return img


def _blob_perturb(p: dict, gen: np.random.Generator, s: float, side: int) -> dict:
    blobs = []
    for b in p["blobs"]:
        blobs.append({
            "cy": b["cy"] + s * gen.uniform(-0.12, 0.12) * side,
            "cx": b["cx"] + s * gen.uniform(-0.12, 0.12) * side,
            "sigma": b["sigma"] * (1.0 + s * gen.uniform(-0.15, 0.15)),
            "color": b["color"] + s * gen.uniform(-45.0, 45.0, size=3),
        })
    return {"base": p["base"] + s * gen.uniform(-25.0, 25.0, size=3), "blobs": blobs}


# --- patch mosaics: upscaled random color grids ----------------------------

def _patch_params(gen: np.random.Generator, side: int) -> dict:
    g = int(gen.integers(4, 9))
    return {"grid": gen.integers(0, 256, size=(g, g, 3)).astype(np.float64)}


def _patch_render(p: dict, side: int, gen: np.random.Generator) -> np.ndarray:
    grid = np.clip(np.rint(p["grid"]), 0, 255).astype(np.uint8)
    return _resize_kernel(grid[None], side, side)[0].astype(np.float64)


def _patch_perturb(p: dict, gen: np.random.Generator, s: float, side: int) -> dict:
    return {"grid": p["grid"] + gen.normal(0.0, 50.0 * s, size=p["grid"].shape)}


_FAMILIES = [
    (_grating_params, _grating_render, _grating_perturb),
    (_checker_params, _checker_render, _checker_perturb),
    (_blob_params, _blob_render, _blob_perturb),
    (_patch_params, _patch_render, _patch_perturb),
]


def _compose(gen: np.random.Generator, family_idx: int, side: int,
             tint: float) -> np.ndarray:
    draw, render, _ = _FAMILIES[family_idx]
    params = draw(gen, side)
    corners = gen.uniform(-tint, tint, size=(2, 2, 3))
    return _to_u8(render(params, side, gen) + _tint_render(corners, side))


def make_texture_images(n: int, side: int = 64, seed: int = 0,
                        tint: float = 45.0) -> list[Image]:
    """n textured RGB images of the given side, cycling through the four
    families; image i depends only on (seed, i).

    `tint` scales a smooth per-source color gradient laid over the texture.
    It is a linearly readable identity cue: large values make instance
    discrimination easy even under heavy augmentation, tint=0 leaves only
    the texture structure itself.
    """
    if n < 1 or side < 4:
        raise ValueError(f"need n >= 1 and side >= 4, got n={n}, side={side}")
    if not (0.0 <= tint <= 128.0):
        raise ValueError(f"tint must be in [0, 128], got {tint}")
    out = []
    for i in range(n):
        gen = RngStream(seed).derive(i).generator()
        out.append(Image(_compose(gen, i % len(_FAMILIES), side, tint=tint)))
    return out


def make_labeled_textures(n_classes: int, per_class: int, side: int = 64,
                          seed: int = 0) -> tuple[list[Image], list[int]]:
    """Class-major labeled corpus where the class is the texture family
    (at most 4 classes).

    The per-source tint stays moderate here: for family-level tasks the
    gradient is class-independent nuisance, not signal.
    """
    if not (2 <= n_classes <= len(_FAMILIES)):
        raise ValueError(f"n_classes must be in 2..{len(_FAMILIES)}, got {n_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    images, labels = [], []
    for c in range(n_classes):
        for j in range(per_class):
            gen = RngStream(seed).derive(c, j).generator()
            images.append(Image(_compose(gen, c, side, tint=45.0)))
            labels.append(c)
    return images, labels


def make_grouped_textures(n_groups: int, per_group: int, side: int = 64,
                          spread: float = 0.5, seed: int = 0) -> list[Image]:
    """Corpus of near-duplicate groups: `per_group` variants of each base
    texture, group-major, image (g, v) depending only on (seed, g, v).

    Variants share the base structure (palette, layout, frequencies, tint)
    and differ by `spread`-scaled parameter jitter plus their own fine
    detail. Retrieval over such a corpus has to tell a source from its own
    group mates, not just from unrelated textures, which makes it a much
    sharper probe of instance discrimination than independent sources.
    spread=0 leaves only fine detail; around 1 the jitter spans a sizable
    fraction of each parameter range.
    """
    if n_groups < 1 or per_group < 1 or side < 4:
        raise ValueError(f"need n_groups, per_group >= 1 and side >= 4, got "
                         f"n_groups={n_groups}, per_group={per_group}, side={side}")
    if not (0.0 <= spread <= 2.0) or not np.isfinite(spread):
        raise ValueError(f"spread must be in [0, 2], got {spread}")
    out = []
    for g in range(n_groups):
        fam = g % len(_FAMILIES)
        draw, render, perturb = _FAMILIES[fam]
        base_gen = RngStream(seed).derive(g).generator()
        base = draw(base_gen, side)
        corners = base_gen.uniform(-70.0, 70.0, size=(2, 2, 3))
        for v in range(per_group):
            gen = RngStream(seed).derive(g, v).generator()
            params = perturb(base, gen, spread, side)
            c = corners + spread * gen.uniform(-22.0, 22.0, size=(2, 2, 3))
            out.append(Image(_to_u8(render(params, side, gen)
                                    + _tint_render(c, side))))
    return out


def make_blobs(k: int, per_cluster: int, dim: int, separation: float = 10.0,
               sigma: float = 1.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """k isotropic Gaussian clusters with every pair of centers exactly
    `separation * sigma` apart (scaled basis vectors, needs k <= dim);
    returns (points (k*per_cluster, dim), labels)."""
    if k > dim:
        raise ValueError(f"need k <= dim for exact separation, got k={k}, dim={dim}")
    gen = RngStream(seed).generator()
    centers = np.zeros((k, dim))
    centers[np.arange(k), np.arange(k)] = separation * sigma / np.sqrt(2.0)
    pts = []
    labels = []
    for j in range(k):
        pts.append(gen.normal(0.0, sigma, size=(per_cluster, dim)) + centers[j])
        labels += [j] * per_cluster
    return np.concatenate(pts), np.asarray(labels)
