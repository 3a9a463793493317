"""Dual-MAE distillation: masking, forward pass, loss, and training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eodeploy import mae, vit
from eodeploy.fixtures import textured_cubes
from eodeploy.rng import stream
from eodeploy.tensor import Tensor, TensorError


def toy_cfg(dim=16, depth=2, heads=2):
    return vit.EncoderConfig(bands=4, temporal=1, patch=(1, 8, 8),
                             dim=dim, depth=depth, heads=heads)


class TestMaskPlan:
    def test_reference_cardinality(self):
        plan = mae.sample_mask(196, 0.75, stream(0, "m"))
        assert len(plan.masked) == 147
        assert len(plan.visible) == 49

    def test_zero_ratio_masks_nothing(self):
        plan = mae.sample_mask(64, 0.0, stream(0, "m"))
        assert len(plan.masked) == 0
        assert len(plan.visible) == 64

    def test_same_seed_identical(self):
        a = mae.sample_mask(64, 0.75, stream(5, "m"))
        b = mae.sample_mask(64, 0.75, stream(5, "m"))
        assert np.array_equal(a.masked, b.masked)

    @given(st.integers(1, 300), st.floats(0.0, 0.99),
           st.integers(0, 2 ** 16))
    @settings(max_examples=50)
    def test_partition_property(self, n, ratio, seed):
        plan = mae.sample_mask(n, ratio, stream(seed, "prop"))
        assert len(plan.masked) == round(ratio * n)
        combined = np.sort(np.concatenate([plan.masked, plan.visible]))
        assert np.array_equal(combined, np.arange(n))

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            mae.sample_mask(64, 1.0, stream(0, "m"))


class TestForward:
    def test_reconstruction_shape(self):
        cfg = toy_cfg()
        params = mae.init_mae_params(cfg, stream(0, "f"))
        cube = Tensor(stream(1, "f").random((2, 4, 1, 64, 64)).astype(np.float32))
        plan = mae.sample_mask(64, 0.75, stream(2, "f"))
        rec = mae.mae_forward(cfg, params, cube, plan)
        assert rec.shape == (2, 64, cfg.patch_dim)

    def test_teacher_mode_sees_everything(self):
        cfg = toy_cfg()
        params = mae.init_mae_params(cfg, stream(0, "t"))
        cube = Tensor(stream(1, "t").random((1, 4, 1, 64, 64)).astype(np.float32))
        rec = mae.mae_forward(cfg, params, cube, mae.full_visibility(64))
        assert rec.shape == (1, 64, cfg.patch_dim)

    def test_masked_content_never_reaches_the_model(self):
        cfg = toy_cfg()
        params = mae.init_mae_params(cfg, stream(0, "hide"))
        rng = stream(1, "hide")
        cube = rng.random((1, 4, 1, 64, 64)).astype(np.float32)
        plan = mae.sample_mask(64, 0.5, stream(2, "hide"))
        rec_a = mae.mae_forward(cfg, params, Tensor(cube), plan)
        # scramble the pixels of every masked patch
        patches = vit.patchify(Tensor(cube), cfg).data.copy()
        patches[:, plan.masked] = rng.random(patches[:, plan.masked].shape)
        scrambled = vit.unpatchify(Tensor(patches), cfg, cfg.grid(64, 64))
        rec_b = mae.mae_forward(cfg, params, scrambled, plan)
        assert np.array_equal(rec_a.data, rec_b.data)


class TestDistillLoss:
    def test_identical_reconstructions_zero(self):
        rec = Tensor(stream(0, "dl").random((1, 8, 16)).astype(np.float32))
        plan = mae.sample_mask(8, 0.5, stream(1, "dl"))
        assert mae.distill_loss(rec, rec, plan).item() == 0.0

    def test_constant_difference(self):
        plan = mae.MaskPlan(4, np.array([2]), np.array([0, 1, 3]))
        a = Tensor(np.zeros((1, 4, 8), dtype=np.float32))
        b = Tensor(np.full((1, 4, 8), 0.5, dtype=np.float32))
        assert mae.distill_loss(a, b, plan).item() == pytest.approx(0.25)

    def test_visible_rows_do_not_contribute(self):
        plan = mae.MaskPlan(4, np.array([1, 2]), np.array([0, 3]))
        rng = stream(3, "dl")
        a = rng.random((1, 4, 8)).astype(np.float32)
        b = a.copy()
        b[:, [0, 3]] += 100.0                      # only visible rows change
        loss = mae.distill_loss(Tensor(b), Tensor(a), plan)
        assert loss.item() == 0.0


class TestTrainDistill:
    def _setup(self):
        teacher_cfg = toy_cfg(dim=32)
        student_cfg = toy_cfg(dim=16)
        teacher = mae.init_mae_params(teacher_cfg, stream(0, "td"))
        student = mae.init_mae_params(student_cfg, stream(1, "td"))
        cubes = textured_cubes(8, size=64, seed=2)
        return teacher_cfg, teacher, student_cfg, student, cubes

    def test_zero_steps_is_identity(self):
        tc, tp, sc, sp, cubes = self._setup()
        res = mae.train_distill(tc, tp, sc, sp, cubes,
                                mae.DistillConfig(steps=0))
        assert res.history == []
        assert mae.weights_checksum(res.full_params) == mae.weights_checksum(sp)

    def test_teacher_frozen_and_history_deterministic(self):
        tc, tp, sc, sp, cubes = self._setup()
        before = mae.weights_checksum(tp)
        cfg = mae.DistillConfig(steps=10, batch_size=4, seed=3)
        a = mae.train_distill(tc, tp, sc, dict(sp), cubes, cfg)
        assert mae.weights_checksum(tp) == before
        b = mae.train_distill(tc, tp, sc, dict(sp), cubes, cfg)
        assert a.history == b.history
        assert (mae.weights_checksum(a.encoder_params)
                == mae.weights_checksum(b.encoder_params))

    def test_pixel_target_arm_runs(self):
        tc, tp, sc, sp, cubes = self._setup()
        res = mae.train_distill(tc, tp, sc, sp, cubes,
                                mae.DistillConfig(steps=5, batch_size=4),
                                target="pixels")
        assert len(res.history) == 5

    def test_unknown_target_rejected(self):
        tc, tp, sc, sp, cubes = self._setup()
        with pytest.raises(ValueError):
            mae.train_distill(tc, tp, sc, sp, cubes,
                              mae.DistillConfig(steps=1), target="bogus")

    def test_decoder_width_rule(self):
        assert mae.decoder_dim(64) == 32
        assert mae.decoder_dim(16) == 16
        assert mae.decoder_config(toy_cfg(dim=16)).depth == 1
