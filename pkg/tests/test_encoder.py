import io
import math

import numpy as np
import pytest

from augnet.encoder import (
    EncoderSpec,
    EncoderState,
    FeatureTaps,
    TrainConfig,
    adam_step,
    backward,
    bn_layout,
    embed,
    extract_features,
    forward,
    init_params,
    param_count,
    param_layout,
    train,
)
from augnet.imaging import AugmentConfig, Image, RngStream
from augnet.losses import loss_fn, tanh_embed

TINY = EncoderSpec(n_blocks=1, block_channels=4, in_side=8, in_channels=3,
                   embed_dim=4, seed=0)


def toy_images(n, side, seed=0, c=3):
    gen = np.random.default_rng(seed)
    return [Image(gen.integers(0, 256, (side, side, c)).astype(np.uint8))
            for _ in range(n)]


# ---------------------------------------------------------------------------
# spec validation and parameter layout


class TestEncoderSpec:
    def test_defaults(self):
        spec = EncoderSpec()
        assert spec.n_blocks == 3
        assert spec.in_side == 32
        assert spec.block_channels == 96
        assert spec.embed_dim == 192

    def test_rejects_indivisible_side(self):
        with pytest.raises(ValueError):
            EncoderSpec(n_blocks=3, in_side=20)

    def test_rejects_bad_channels(self):
        with pytest.raises(ValueError):
            EncoderSpec(in_channels=2)

    def test_rejects_bad_block_count(self):
        for n in (0, 6):
            with pytest.raises(ValueError):
                EncoderSpec(n_blocks=n, in_side=64)

    def test_rejects_bad_embed_dim(self):
        with pytest.raises(ValueError):
            EncoderSpec(embed_dim=0)


def expected_param_count(spec):
    # closed-form shape arithmetic, independent of param_layout
    total = 0
    cin = spec.in_channels
    for _ in range(spec.n_blocks):
        for _ in range(3):
            total += 9 * cin * spec.block_channels  # conv w
            total += spec.block_channels            # conv b
            total += 2 * spec.block_channels        # bn gamma, beta
            cin = spec.block_channels
    total += spec.block_channels * spec.embed_dim + spec.embed_dim
    return total


class TestParams:
    @pytest.mark.parametrize("spec", [
        EncoderSpec(n_blocks=3, block_channels=96, in_side=32, in_channels=3,
                    embed_dim=192),
        EncoderSpec(n_blocks=4, block_channels=16, in_side=32, in_channels=1,
                    embed_dim=24),
        EncoderSpec(n_blocks=5, block_channels=8, in_side=64, in_channels=3,
                    embed_dim=10),
        TINY,
    ])
    def test_param_count_closed_form(self, spec):
        assert param_count(spec) == expected_param_count(spec)
        assert init_params(spec).params.size == expected_param_count(spec)

    def test_same_seed_bit_identical(self):
        a = init_params(EncoderSpec(seed=11))
        b = init_params(EncoderSpec(seed=11))
        assert np.array_equal(a.params, b.params)

    def test_different_seeds_differ(self):
        a = init_params(EncoderSpec(seed=1))
        b = init_params(EncoderSpec(seed=2))
        assert not np.array_equal(a.params, b.params)

    def test_init_structure(self):
        spec = EncoderSpec(n_blocks=3, block_channels=32, in_side=32,
                           in_channels=3, embed_dim=64, seed=5)
        state = init_params(spec)
        views = dict(zip([n for n, _ in param_layout(spec)],
                         np.split(state.params, np.cumsum(
                             [int(np.prod(s)) for _, s in param_layout(spec)])[:-1])))
        assert np.all(views["b0l0.b"] == 0)
        assert np.all(views["b1l2.gamma"] == 1)
        assert np.all(views["b2l1.beta"] == 0)
        w = views["b0l0.w"]
        fan_in = 9 * 3
        assert abs(w.std() - math.sqrt(2.0 / fan_in)) < 0.15 * math.sqrt(2.0 / fan_in)

    def test_bn_stats_init(self):
        state = init_params(TINY)
        names = [n for n, _ in bn_layout(TINY)]
        views = dict(zip(names, np.split(state.bn_stats, np.cumsum(
            [int(np.prod(s)) for _, s in bn_layout(TINY)])[:-1])))
        assert np.all(views["b0l0.mean"] == 0)
        assert np.all(views["b0l2.var"] == 1)

    def test_adam_buffers_zero(self):
        state = init_params(TINY)
        assert np.all(state.adam_m == 0)
        assert np.all(state.adam_v == 0)
        assert state.step == 0


# ---------------------------------------------------------------------------
# forward


class TestForward:
    def test_output_shapes_and_taps(self):
        for n_blocks, side in ((3, 32), (4, 32), (5, 64)):
            spec = EncoderSpec(n_blocks=n_blocks, block_channels=6,
                               in_side=side, in_channels=3, embed_dim=7)
            state = init_params(spec)
            x = np.random.default_rng(0).uniform(-1, 1, (5, 3, side, side))
            pre, taps = forward(state, x.astype(np.float32))
            assert pre.shape == (5, 7)
            assert isinstance(taps, FeatureTaps)
            assert len(taps.maps) == n_blocks
            for b, fmap in enumerate(taps.maps):
                assert fmap.shape == (5, 6, side >> (b + 1), side >> (b + 1))

    def test_duplicate_rows_identical_inference(self):
        state = init_params(TINY)
        gen = np.random.default_rng(1)
        row = gen.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32)
        x = np.concatenate([row, row, row])
        pre, _ = forward(state, x, training=False)
        assert np.array_equal(pre[0], pre[1])
        assert np.array_equal(pre[0], pre[2])

    def test_zero_input_zero_head_gives_zero(self):
        state = init_params(TINY)
        layout = param_layout(TINY)
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            if name.startswith("head."):
                state.params[offset:offset + size] = 0
            offset += size
        pre, _ = forward(state, np.zeros((2, 3, 8, 8), np.float32))
        assert np.all(pre == 0)

    def test_shape_mismatch_rejected(self):
        state = init_params(TINY)
        with pytest.raises(ValueError):
            forward(state, np.zeros((2, 3, 16, 16), np.float32))
        with pytest.raises(ValueError):
            forward(state, np.zeros((2, 1, 8, 8), np.float32))

    def test_training_updates_running_stats(self):
        state = init_params(TINY)
        before = state.bn_stats.copy()
        x = np.random.default_rng(2).uniform(-1, 1, (6, 3, 8, 8)).astype(np.float32)
        forward(state, x, training=True)
        assert not np.array_equal(before, state.bn_stats)

    def test_inference_leaves_stats_untouched(self):
        state = init_params(TINY)
        before = state.bn_stats.copy()
        x = np.random.default_rng(3).uniform(-1, 1, (6, 3, 8, 8)).astype(np.float32)
        forward(state, x, training=False)
        assert np.array_equal(before, state.bn_stats)

    def test_deterministic(self):
        state = init_params(TINY)
        x = np.random.default_rng(4).uniform(-1, 1, (4, 3, 8, 8)).astype(np.float32)
        a, _ = forward(state, x)
        b, _ = forward(state, x)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward


class TestBackward:
    def test_requires_training_forward(self):
        state = init_params(TINY)
        x = np.random.default_rng(5).uniform(-1, 1, (4, 3, 8, 8)).astype(np.float32)
        forward(state, x, training=False)
        with pytest.raises(RuntimeError):
            backward(state, np.ones((4, 4)))

    def test_zero_loss_grad_zero_gradient(self):
        state = init_params(TINY)
        x = np.random.default_rng(6).uniform(-1, 1, (4, 3, 8, 8)).astype(np.float32)
        forward(state, x, training=True)
        grad = backward(state, np.zeros((4, 4)))
        assert np.all(grad == 0)

    def test_gradient_finite(self):
        state = init_params(TINY)
        x = np.random.default_rng(7).uniform(-1, 1, (4, 3, 8, 8)).astype(np.float32)
        forward(state, x, training=True)
        grad = backward(state, np.random.default_rng(8).normal(size=(4, 4)))
        assert np.all(np.isfinite(grad))
        assert grad.shape == state.params.shape

    def test_loss_grad_shape_rejected(self):
        state = init_params(TINY)
        x = np.random.default_rng(9).uniform(-1, 1, (4, 3, 8, 8)).astype(np.float32)
        forward(state, x, training=True)
        with pytest.raises(ValueError):
            backward(state, np.ones((4, 5)))

    @pytest.mark.parametrize("kind", ["softmax", "contrast"])
    def test_finite_differences_end_to_end(self, kind):
        # tiny 1-block spec at f64, chained through tanh and the loss
        spec = EncoderSpec(n_blocks=1, block_channels=3, in_side=8,
                           in_channels=3, embed_dim=4, seed=2)
        state = init_params(spec, dtype=np.float64)
        gen = np.random.default_rng(10)
        n, m = 2, 2
        x = gen.uniform(-1, 1, (n * m, 3, 8, 8))
        fn = loss_fn(kind)

        def value(params):
            st = EncoderState(spec=spec, params=params, adam_m=state.adam_m,
                              adam_v=state.adam_v, step=0,
                              bn_stats=state.bn_stats.copy())
            out, _ = forward(st, x, training=True)
            return fn(tanh_embed(out.reshape(n, m, -1))).value

        pre, _ = forward(state, x, training=True)
        res = fn(tanh_embed(pre.reshape(n, m, -1)))
        grad = backward(state, res.grad.reshape(n * m, -1))

        eps = 1e-5
        sel = np.random.default_rng(11).choice(state.params.size, 50, replace=False)
        for i in sel:
            pp = state.params.copy()
            pp[i] += eps
            pm = state.params.copy()
            pm[i] -= eps
            fd = (value(pp) - value(pm)) / (2 * eps)
            assert abs(fd - grad[i]) / max(1.0, abs(fd)) < 1e-6, (kind, i)

    def test_multi_block_finite_differences(self):
        spec = EncoderSpec(n_blocks=2, block_channels=4, in_side=8,
                           in_channels=1, embed_dim=5, seed=4)
        state = init_params(spec, dtype=np.float64)
        gen = np.random.default_rng(12)
        x = gen.uniform(-1, 1, (6, 1, 8, 8))
        fn = loss_fn("contrast")

        def value(params):
            st = EncoderState(spec=spec, params=params, adam_m=state.adam_m,
                              adam_v=state.adam_v, step=0,
                              bn_stats=state.bn_stats.copy())
            out, _ = forward(st, x, training=True)
            return fn(tanh_embed(out.reshape(3, 2, -1))).value

        pre, _ = forward(state, x, training=True)
        res = fn(tanh_embed(pre.reshape(3, 2, -1)))
        grad = backward(state, res.grad.reshape(6, -1))
        eps = 1e-5
        for i in np.random.default_rng(13).choice(state.params.size, 40,
                                                  replace=False):
            pp = state.params.copy()
            pp[i] += eps
            pm = state.params.copy()
            pm[i] -= eps
            fd = (value(pp) - value(pm)) / (2 * eps)
            assert abs(fd - grad[i]) / max(1.0, abs(fd)) < 1e-6


# ---------------------------------------------------------------------------
# adam


class TestAdam:
    def test_zero_grad_keeps_params(self):
        state = init_params(TINY)
        out = adam_step(state, np.zeros_like(state.params), 1e-3)
        assert np.array_equal(out.params, state.params)
        assert out.step == 1

    def test_first_step_unit_grad_moves_by_lr(self):
        state = init_params(TINY, dtype=np.float64)
        lr = 1e-3
        out = adam_step(state, np.ones_like(state.params), lr)
        delta = out.params - state.params
        assert np.allclose(delta, -lr, rtol=1e-6)

    def test_identical_inputs_identical_outputs(self):
        a = init_params(TINY)
        b = init_params(TINY)
        g = np.random.default_rng(14).normal(size=a.params.shape).astype(np.float32)
        oa = adam_step(a, g, 2e-4)
        ob = adam_step(b, g, 2e-4)
        assert np.array_equal(oa.params, ob.params)
        assert np.array_equal(oa.adam_m, ob.adam_m)
        assert np.array_equal(oa.adam_v, ob.adam_v)

    def test_non_finite_grad_rejected(self):
        state = init_params(TINY)
        g = np.zeros_like(state.params)
        g[0] = np.inf
        with pytest.raises(ValueError):
            adam_step(state, g, 1e-3)

    def test_bad_lr_rejected(self):
        state = init_params(TINY)
        g = np.zeros_like(state.params)
        for lr in (0.0, -1e-3, float("nan")):
            with pytest.raises(ValueError):
                adam_step(state, g, lr)

    def test_shape_mismatch_rejected(self):
        state = init_params(TINY)
        with pytest.raises(ValueError):
            adam_step(state, np.zeros(3), 1e-3)

    def test_scalar_hand_trace_two_steps(self):
        # g = 1 both steps: m_t and v_t bias-correct back to exactly 1, so
        # each update is -lr / (1 + eps)
        spec = TINY
        state = init_params(spec, dtype=np.float64)
        lr = 0.01
        s1 = adam_step(state, np.ones_like(state.params), lr)
        s2 = adam_step(s1, np.ones_like(state.params), lr)
        step_size = lr / (1 + 1e-8)
        assert np.allclose(state.params - s1.params, step_size, rtol=1e-6)
        assert np.allclose(s1.params - s2.params, step_size, rtol=1e-6)


# ---------------------------------------------------------------------------
# train loop


class TestTrain:
    def setup_method(self):
        self.spec = EncoderSpec(n_blocks=1, block_channels=4, in_side=16,
                                in_channels=3, embed_dim=8, seed=0)
        self.aug = AugmentConfig(out_side=16)
        self.images = toy_images(12, 24, seed=42)

    def cfg(self, **kw):
        base = dict(n_sources_per_batch=4, augments_per_source=2, steps=3,
                    loss_kind="contrast", augment=self.aug, seed=1)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_steps_returns_init(self):
        state = train(self.images, self.cfg(steps=0), self.spec)
        ref = init_params(self.spec)
        assert np.array_equal(state.params, ref.params)
        assert state.step == 0

    def test_small_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(self.images[:3], self.cfg(), self.spec)

    def test_out_side_must_match_in_side(self):
        bad = self.cfg(augment=AugmentConfig(out_side=8))
        with pytest.raises(ValueError):
            train(self.images, bad, self.spec)

    def test_step_counter_and_log(self):
        log = io.StringIO()
        state = train(self.images, self.cfg(steps=3), self.spec, log_stream=log)
        assert state.step == 3
        lines = log.getvalue().strip().split("\n")
        assert len(lines) == 3
        for t, line in enumerate(lines):
            step_s, loss_s = line.split("\t")
            assert int(step_s) == t
            float(loss_s)  # parses

    def test_deterministic_end_to_end(self):
        a = train(self.images, self.cfg(steps=4), self.spec)
        b = train(self.images, self.cfg(steps=4), self.spec)
        assert np.array_equal(a.params, b.params)
        assert np.array_equal(a.bn_stats, b.bn_stats)

    def test_seed_changes_trajectory(self):
        a = train(self.images, self.cfg(steps=2, seed=1), self.spec)
        b = train(self.images, self.cfg(steps=2, seed=2), self.spec)
        assert not np.array_equal(a.params, b.params)

    def test_checkpoints_written(self, tmp_path):
        cfg = self.cfg(steps=4, checkpoint_every=2)
        train(self.images, cfg, self.spec, checkpoint_dir=tmp_path)
        found = sorted(p.name for p in tmp_path.iterdir())
        assert len(found) == 2

    def test_on_step_hook_sees_every_step(self):
        seen = []
        train(self.images, self.cfg(steps=3), self.spec,
              on_step=lambda t, loss, st: seen.append((t, loss)))
        assert [t for t, _ in seen] == [0, 1, 2]
        assert all(math.isfinite(l) for _, l in seen)

    def test_toy_run_loss_decreases(self):
        # 64 sources, N=8, M=4, 300 steps: last-50 mean under first-50 mean
        losses = []
        spec = EncoderSpec(n_blocks=1, block_channels=6, in_side=16,
                           in_channels=3, embed_dim=8, seed=0)
        images = toy_images(64, 20, seed=7)
        cfg = TrainConfig(n_sources_per_batch=8, augments_per_source=4,
                          steps=300, loss_kind="contrast",
                          augment=AugmentConfig(out_side=16), seed=3)
        train(images, cfg, spec,
              on_step=lambda t, loss, st: losses.append(loss))
        first = float(np.mean(losses[:50]))
        last = float(np.mean(losses[-50:]))
        assert last < first


# ---------------------------------------------------------------------------
# embed / extract_features


class TestEmbed:
    def setup_method(self):
        self.state = init_params(TINY)

    def test_shape_and_open_interval(self):
        vecs = embed(self.state, toy_images(5, 12, seed=1), short_side=8)
        assert vecs.shape == (5, 4)
        assert vecs.dtype == np.float64
        assert np.all(np.abs(vecs) < 1.0)

    def test_identical_images_identical_rows(self):
        img = toy_images(1, 16, seed=2)[0]
        vecs = embed(self.state, [img, img, img], short_side=8)
        assert np.array_equal(vecs[0], vecs[1])
        assert np.array_equal(vecs[1], vecs[2])

    def test_batch_size_independent(self):
        imgs = toy_images(3, 8, seed=3)
        one = embed(self.state, imgs[:1], short_side=8)
        many = embed(self.state, imgs, short_side=8)
        assert np.allclose(one[0], many[0], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            embed(self.state, [], short_side=8)

    def test_bad_short_side_rejected(self):
        with pytest.raises(ValueError):
            embed(self.state, toy_images(1, 8), short_side=0)

    def test_nonsquare_inputs(self):
        gen = np.random.default_rng(4)
        imgs = [Image(gen.integers(0, 256, (30, 50, 3)).astype(np.uint8)),
                Image(gen.integers(0, 256, (64, 16, 3)).astype(np.uint8))]
        vecs = embed(self.state, imgs, short_side=16)
        assert vecs.shape == (2, 4)


class TestExtractFeatures:
    def test_shape(self):
        spec = EncoderSpec(n_blocks=3, block_channels=5, in_side=32,
                           in_channels=3, embed_dim=6)
        state = init_params(spec)
        feats = extract_features(state, toy_images(4, 32, seed=5), tap=2)
        assert feats.shape == (4, 5)

    def test_tap_bounds(self):
        state = init_params(TINY)
        for tap in (0, 2):
            with pytest.raises(ValueError):
                extract_features(state, toy_images(1, 8), tap=tap)

    def test_duplicates(self):
        state = init_params(TINY)
        img = toy_images(1, 8, seed=6)[0]
        feats = extract_features(state, [img, img], tap=1)
        assert np.array_equal(feats[0], feats[1])


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
