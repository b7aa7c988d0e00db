"""Tests for the procedural corpus generators."""

import numpy as np
import pytest

from augnet.datasets import (
    make_blobs,
    make_grouped_textures,
    make_labeled_textures,
    make_texture_images,
)


def _stack(images):
    return np.stack([im.pixels.astype(np.float64) for im in images])


class TestTextureImages:
    def test_count_shape_dtype(self):
        imgs = make_texture_images(6, side=32, seed=0)
        assert len(imgs) == 6
        for im in imgs:
            assert im.pixels.shape == (32, 32, 3)
            assert im.pixels.dtype == np.uint8

    def test_deterministic_in_seed(self):
        a = _stack(make_texture_images(5, side=24, seed=9))
        b = _stack(make_texture_images(5, side=24, seed=9))
        assert np.array_equal(a, b)

    def test_seed_changes_content(self):
        a = _stack(make_texture_images(5, side=24, seed=0))
        b = _stack(make_texture_images(5, side=24, seed=1))
        assert not np.array_equal(a, b)

    def test_prefix_stable(self):
        # image i depends only on (seed, i), not on n
        a = _stack(make_texture_images(3, side=24, seed=4))
        b = _stack(make_texture_images(8, side=24, seed=4))[:3]
        assert np.array_equal(a, b)

    def test_images_distinct(self):
        imgs = _stack(make_texture_images(8, side=32, seed=2))
        for i in range(8):
            for j in range(i + 1, 8):
                assert np.abs(imgs[i] - imgs[j]).mean() > 1.0

    def test_tint_changes_content(self):
        a = _stack(make_texture_images(4, side=24, seed=3, tint=0.0))
        b = _stack(make_texture_images(4, side=24, seed=3, tint=60.0))
        assert not np.array_equal(a, b)

    def test_tint_zero_deterministic(self):
        a = _stack(make_texture_images(4, side=24, seed=3, tint=0.0))
        b = _stack(make_texture_images(4, side=24, seed=3, tint=0.0))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("n,side", [(0, 32), (-1, 32), (3, 3), (3, 0)])
    def test_rejects_bad_args(self, n, side):
        with pytest.raises(ValueError):
            make_texture_images(n, side=side)

    @pytest.mark.parametrize("tint", [-1.0, 200.0, float("nan")])
    def test_rejects_bad_tint(self, tint):
        with pytest.raises(ValueError):
            make_texture_images(3, side=24, tint=tint)


class TestLabeledTextures:
    def test_class_major_layout(self):
        images, labels = make_labeled_textures(3, 4, side=24, seed=0)
        assert len(images) == 12
        assert labels == [0] * 4 + [1] * 4 + [2] * 4

    def test_deterministic(self):
        a, la = make_labeled_textures(2, 3, side=24, seed=7)
        b, lb = make_labeled_textures(2, 3, side=24, seed=7)
        assert la == lb
        assert np.array_equal(_stack(a), _stack(b))

    @pytest.mark.parametrize("n_classes,per_class", [(1, 2), (5, 2), (2, 0)])
    def test_rejects_bad_args(self, n_classes, per_class):
        with pytest.raises(ValueError):
            make_labeled_textures(n_classes, per_class)


class TestGroupedTextures:
    def test_count_and_shape(self):
        imgs = make_grouped_textures(5, 3, side=32, spread=0.5, seed=0)
        assert len(imgs) == 15
        assert all(im.pixels.shape == (32, 32, 3) for im in imgs)

    def test_deterministic(self):
        a = _stack(make_grouped_textures(4, 2, side=24, spread=0.4, seed=3))
        b = _stack(make_grouped_textures(4, 2, side=24, spread=0.4, seed=3))
        assert np.array_equal(a, b)

    def test_group_mates_closer_than_strangers(self):
        imgs = _stack(make_grouped_textures(8, 4, side=48, spread=0.5, seed=1))
        groups = imgs.reshape(8, 4, 48, 48, 3)
        within, across = [], []
        for g in range(8):
            for v in range(1, 4):
                within.append(np.abs(groups[g, 0] - groups[g, v]).mean())
            other = (g + 1) % 8
            across.append(np.abs(groups[g, 0] - groups[other, 0]).mean())
        assert np.mean(within) < 0.5 * np.mean(across)

    def test_variants_not_identical(self):
        imgs = _stack(make_grouped_textures(4, 4, side=32, spread=0.3, seed=2))
        groups = imgs.reshape(4, 4, 32, 32, 3)
        for g in range(4):
            for v in range(1, 4):
                assert np.abs(groups[g, 0] - groups[g, v]).max() > 0

    def test_spread_widens_groups(self):
        def mean_within(spread):
            imgs = _stack(make_grouped_textures(8, 2, side=32,
                                                spread=spread, seed=5))
            groups = imgs.reshape(8, 2, 32, 32, 3)
            return np.mean([np.abs(groups[g, 0] - groups[g, 1]).mean()
                            for g in range(8)])

        assert mean_within(0.2) < mean_within(0.8) < mean_within(1.6)

    @pytest.mark.parametrize("kwargs", [
        {"n_groups": 0, "per_group": 2},
        {"n_groups": 2, "per_group": 0},
        {"n_groups": 2, "per_group": 2, "side": 3},
        {"n_groups": 2, "per_group": 2, "spread": -0.1},
        {"n_groups": 2, "per_group": 2, "spread": 2.5},
        {"n_groups": 2, "per_group": 2, "spread": float("nan")},
    ])
    def test_rejects_bad_args(self, kwargs):
        with pytest.raises(ValueError):
            make_grouped_textures(**kwargs)


class TestBlobs:
    def test_shapes_and_labels(self):
        pts, labels = make_blobs(3, 10, dim=8, seed=0)
        assert pts.shape == (30, 8)
        assert labels.shape == (30,)
        assert sorted(set(labels.tolist())) == [0, 1, 2]

    def test_center_separation_exact(self):
        sep, sigma = 10.0, 2.0
        pts, labels = make_blobs(4, 200, dim=16, separation=sep,
                                 sigma=sigma, seed=1)
        centers = np.stack([pts[labels == j].mean(axis=0) for j in range(4)])
        for i in range(4):
            for j in range(i + 1, 4):
                d = np.linalg.norm(centers[i] - centers[j])
                assert abs(d - sep * sigma) < sep * sigma * 0.1

    def test_deterministic(self):
        a, _ = make_blobs(2, 5, dim=4, seed=6)
        b, _ = make_blobs(2, 5, dim=4, seed=6)
        assert np.array_equal(a, b)

    def test_rejects_k_above_dim(self):
        with pytest.raises(ValueError):
            make_blobs(5, 10, dim=4)
