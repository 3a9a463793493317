"""Task heads: shapes, losses, and initialization rules."""

import numpy as np
import pytest

from eodeploy import heads, ops, vit
from eodeploy.rng import stream
from eodeploy.tensor import ShapeError, Tensor


def toy_cfg(dim=16, depth=2):
    return vit.EncoderConfig(bands=4, temporal=1, patch=(1, 8, 8),
                             dim=dim, depth=depth, heads=2)


def encoder_output(cfg, size=64, batch=2, seed=0):
    params = vit.init_encoder_params(cfg, stream(seed, "heads-enc"))
    cube = Tensor(stream(seed + 1, "heads-x").random(
        (batch, 4, 1, size, size)).astype(np.float32))
    return vit.encode(cube, cfg, params)


class TestSpecs:
    def test_regressor_forces_single_channel(self):
        spec = heads.HeadSpec("upernet-regressor", classes=7)
        assert spec.classes == 1

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            heads.HeadSpec("resnet")

    def test_loss_weight_positivity(self):
        with pytest.raises(ValueError):
            heads.LossSpec(class_weights=(1.0, 0.0))

    def test_ignore_collision_rejected(self):
        with pytest.raises(ValueError):
            heads.LossSpec(class_weights=(1.0, 1.0), ignore=1)


class TestClassifier:
    def test_logit_shape(self):
        cfg = toy_cfg()
        spec = heads.HeadSpec("mlp-classifier", classes=2, hidden=32)
        params, state = heads.init_head_params(spec, cfg, stream(2, "clf"))
        out = encoder_output(cfg)
        logits = heads.head_forward(spec, out, params, state)
        assert logits.shape == (2, 2)

    def test_zero_weights_tie_to_class_zero(self):
        cfg = toy_cfg()
        spec = heads.HeadSpec("mlp-classifier", classes=2, hidden=8)
        params, state = heads.init_head_params(spec, cfg, stream(3, "clf"))
        zeroed = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
        logits = heads.head_forward(spec, encoder_output(cfg), zeroed, state)
        assert np.all(logits.data == 0.0)
        assert np.all(heads.predict_label(logits) == 0)

    def test_manual_matrix_arithmetic(self):
        cfg = toy_cfg(dim=4)
        spec = heads.HeadSpec("mlp-classifier", classes=2, hidden=3)
        rng = stream(4, "clf")
        token = rng.normal(size=(1, 4)).astype(np.float32)
        w1 = rng.normal(size=(4, 3)).astype(np.float32)
        w2 = rng.normal(size=(3, 2)).astype(np.float32)
        params = {"fc1/w": Tensor(w1), "fc1/b": Tensor(np.zeros(3, np.float32)),
                  "fc2/w": Tensor(w2), "fc2/b": Tensor(np.zeros(2, np.float32))}
        logits = heads.mlp_classify(Tensor(token), params)
        expected = np.maximum(token @ w1, 0.0) @ w2
        assert np.allclose(logits.data, expected, atol=1e-6)

    def test_softmax_of_logits_normalized(self):
        cfg = toy_cfg()
        spec = heads.HeadSpec("mlp-classifier", classes=2, hidden=16)
        params, state = heads.init_head_params(spec, cfg, stream(5, "clf"))
        logits = heads.head_forward(spec, encoder_output(cfg), params, state)
        probs = ops.softmax(logits)
        assert np.allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)


class TestDecoders:
    @pytest.mark.parametrize("kind,channels", [
        ("unet-decoder", 2), ("upernet-decoder", 2), ("upernet-regressor", 1)])
    def test_output_resolution(self, kind, channels):
        cfg = toy_cfg()
        spec = heads.HeadSpec(kind, classes=2, width=16, dropout=0.0)
        params, state = heads.init_head_params(spec, cfg, stream(6, "dec"),
                                               grid_hw=8)
        out = encoder_output(cfg)
        logits = heads.head_forward(spec, out, params, state, out_size=(64, 64))
        assert logits.shape == (2, channels, 64, 64)

    def test_unet_needs_power_of_two_patch(self):
        cfg = vit.EncoderConfig(patch=(1, 6, 6), dim=12, heads=2, depth=2)
        with pytest.raises(ShapeError):
            heads.init_head_params(heads.HeadSpec("unet-decoder"), cfg,
                                   stream(7, "dec"))

    def test_upernet_requires_grid(self):
        with pytest.raises(ValueError):
            heads.init_head_params(heads.HeadSpec("upernet-decoder"),
                                   toy_cfg(), stream(8, "dec"))

    def test_ppm_pool_sizes(self):
        x = Tensor(stream(9, "ppm").random((1, 3, 8, 8)).astype(np.float32))
        for s in (1, 2, 3, 6):
            pooled = ops.adaptive_avg_pool2d(x, (s, s))
            assert pooled.shape == (1, 3, s, s)

    def test_ppm_constant_input_preserved(self):
        x = Tensor(np.full((1, 3, 8, 8), 0.7, dtype=np.float32))
        for s in (1, 2, 3, 6):
            pooled = ops.adaptive_avg_pool2d(x, (s, s))
            assert np.allclose(pooled.data, 0.7, atol=1e-6)

    def test_taps_to_maps_drops_class_token(self):
        cfg = toy_cfg()
        out = encoder_output(cfg)
        maps, grid = heads.taps_to_maps(out.taps)
        assert maps[0].shape == (2, cfg.dim, 8, 8)
        assert grid == 8


class TestLosses:
    def test_masked_rmse_worked_example(self):
        pred = Tensor(np.array([[0.0, 9.0, 0.0]], dtype=np.float32))
        target = np.array([[3.0, 0.0, 4.0]], dtype=np.float32)
        loss = heads.masked_rmse(pred, target)
        assert loss.item() == pytest.approx(np.sqrt(12.5), rel=1e-6)

    def test_masked_rmse_extra_zero_targets_ignored(self):
        pred = Tensor(np.array([[0.0, 9.0, 0.0, 123.0]], dtype=np.float32))
        target = np.array([[3.0, 0.0, 4.0, 0.0]], dtype=np.float32)
        loss = heads.masked_rmse(pred, target)
        assert loss.item() == pytest.approx(np.sqrt(12.5), rel=1e-6)

    def test_masked_rmse_all_zero_rejected(self):
        with pytest.raises(ValueError):
            heads.masked_rmse(Tensor(np.ones((2, 2), np.float32)),
                              np.zeros((2, 2), np.float32))

    def test_batch_rmse_skips_all_zero_images(self):
        pred = Tensor(np.ones((2, 1, 2, 2), dtype=np.float32))
        targets = np.zeros((2, 1, 2, 2), dtype=np.float32)
        targets[0] = 2.0
        loss = heads.batch_masked_rmse(pred, targets)
        assert loss.item() == pytest.approx(1.0)

    def test_segmentation_ce_matches_flat_ce(self):
        rng = stream(10, "loss")
        logits = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        targets = rng.integers(0, 2, (1, 4, 4))
        spec = heads.LossSpec(class_weights=(2.0, 1.0))
        a = heads.weighted_cross_entropy(Tensor(logits), targets, spec)
        flat = logits.transpose(0, 2, 3, 1).reshape(-1, 2)
        b = ops.weighted_cross_entropy(Tensor(flat), targets.reshape(-1),
                                       (2.0, 1.0), -1)
        assert a.item() == pytest.approx(b.item(), rel=1e-6)

    def test_predict_label_ties_to_lower_index(self):
        logits = Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32))
        assert np.all(heads.predict_label(logits) == 0)
