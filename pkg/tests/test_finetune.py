"""Frozen-encoder fine-tuning: early stopping, best-epoch selection, and
encoder immutability."""

import numpy as np
import pytest

from eodeploy import finetune as ft
from eodeploy import heads, mae, vit
from eodeploy.fixtures import classifier_records, water_records
from eodeploy.rng import stream


def setup_classifier(seed=0, dim=16):
    cfg = vit.EncoderConfig(bands=4, temporal=1, patch=(1, 16, 16),
                            dim=dim, depth=2, heads=2)
    rng = stream(seed, "ft-test")
    enc = vit.init_encoder_params(cfg, rng)
    spec = heads.HeadSpec(kind="mlp-classifier", classes=2, hidden=32,
                          dropout=0.0)
    hp, hs = heads.init_head_params(spec, cfg, rng, grid_hw=4)
    loss = heads.LossSpec("weighted-cross-entropy", (1.0, 1.0))
    return cfg, enc, spec, hp, hs, loss


class TestFinetune:
    def test_train_loss_decreases(self):
        cfg, enc, spec, hp, hs, loss = setup_classifier()
        records = classifier_records(24, seed=1)
        res = ft.finetune(cfg, enc, spec, hp, hs, records[:16], records[16:],
                          ft.TrainConfig(epochs=15, batch_size=8, seed=0,
                                         patience=15), loss)
        assert res.history[-1][1] < res.history[0][1]

    def test_encoder_bytes_unchanged(self):
        cfg, enc, spec, hp, hs, loss = setup_classifier()
        before = mae.weights_checksum(enc)
        records = classifier_records(16, seed=2)
        ft.finetune(cfg, enc, spec, hp, hs, records[:12], records[12:],
                    ft.TrainConfig(epochs=5, batch_size=8, seed=0), loss)
        assert mae.weights_checksum(enc) == before

    def test_early_stopping_before_epoch_budget(self):
        cfg, enc, spec, hp, hs, loss = setup_classifier()
        records = classifier_records(16, seed=3)
        res = ft.finetune(cfg, enc, spec, hp, hs, records[:12], records[12:],
                          ft.TrainConfig(epochs=500, batch_size=8, seed=0,
                                         patience=3), loss)
        assert len(res.history) < 500

    def test_best_epoch_has_min_val_loss_and_selected_flag(self):
        cfg, enc, spec, hp, hs, loss = setup_classifier()
        records = classifier_records(20, seed=4)
        res = ft.finetune(cfg, enc, spec, hp, hs, records[:14], records[14:],
                          ft.TrainConfig(epochs=10, batch_size=8, seed=0),
                          loss)
        vals = [h[2] for h in res.history]
        assert res.best_epoch == int(np.argmin(vals))
        selected = [h[0] for h in res.history if h[4] == 1]
        assert selected == [res.best_epoch]

    def test_returned_head_reproduces_best_val_loss(self):
        cfg, enc, spec, hp, hs, loss = setup_classifier()
        records = classifier_records(20, seed=5)
        res = ft.finetune(cfg, enc, spec, hp, hs, records[:14], records[14:],
                          ft.TrainConfig(epochs=8, batch_size=8, seed=0),
                          loss)
        rerun = ft.evaluate_loss(cfg, enc, spec, res.head_params,
                                 res.head_state, records[14:], loss)
        assert rerun == pytest.approx(min(h[2] for h in res.history),
                                      rel=1e-6)

    def test_deterministic_given_seed(self):
        records = classifier_records(16, seed=6)
        outs = []
        for _ in range(2):
            cfg, enc, spec, hp, hs, loss = setup_classifier(seed=7)
            res = ft.finetune(cfg, enc, spec, hp, hs, records[:12],
                              records[12:],
                              ft.TrainConfig(epochs=4, batch_size=8, seed=1),
                              loss)
            outs.append(mae.weights_checksum(res.head_params))
        assert outs[0] == outs[1]

    def test_train_encoder_updates_weights(self):
        cfg, enc, spec, hp, hs, loss = setup_classifier(seed=8)
        before = mae.weights_checksum(enc)
        records = classifier_records(12, seed=8)
        res = ft.finetune(cfg, enc, spec, hp, hs, records[:8], records[8:],
                          ft.TrainConfig(epochs=2, batch_size=8, seed=0),
                          loss, train_encoder=True)
        assert res.encoder_params is not None
        assert mae.weights_checksum(res.encoder_params) != before
        assert mae.weights_checksum(enc) == before

    def test_segmentation_smoke(self):
        cfg = vit.EncoderConfig(bands=4, temporal=1, patch=(1, 8, 8),
                                dim=16, depth=2, heads=2)
        rng = stream(9, "ft-test")
        enc = vit.init_encoder_params(cfg, rng)
        spec = heads.HeadSpec(kind="unet-decoder", classes=2, width=8)
        hp, hs = heads.init_head_params(spec, cfg, rng, grid_hw=4)
        loss = heads.LossSpec("weighted-cross-entropy", (1.0, 1.0))
        records = water_records(8, seed=9, size=32)
        res = ft.finetune(cfg, enc, spec, hp, hs, records[:6], records[6:],
                          ft.TrainConfig(epochs=3, batch_size=4, seed=0),
                          loss)
        assert len(res.history) == 3
        assert all(np.isfinite(h[2]) for h in res.history)

    def test_invalid_patience_rejected(self):
        with pytest.raises(ValueError):
            ft.TrainConfig(patience=0)

    def test_history_csv_schema(self):
        text = ft.history_csv([(0, 1.0, 2.0, 1e-3, 1)])
        assert text.splitlines()[0] == "epoch,train_loss,val_loss,lr,selected"
        assert text.splitlines()[1].startswith("0,1,2,")
