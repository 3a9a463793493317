"""Frozen-encoder fine-tuning of task heads.

The encoder is never updated (its outputs are cached per tile and flip
variant), heads train with Adam under a linear-warmup + cosine-annealed
learning rate, and early stopping returns the head from the best
validation epoch.  Setting ``train_encoder=True`` instead backpropagates
through the encoder (the randomly-initialised baseline arm).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import heads, vit
from .datacube import SamplingPlan, TileRecord, draw_epoch
from .optim import Adam, warmup_cosine_lr
from .rng import stream
from .tensor import Tape, Tensor, TensorError, backward, recording


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    patience: int = 10
    augment_hflip: bool = False
    augment_vflip: bool = False

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("early-stopping patience must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup fraction outside [0,1)")


@dataclass
class FinetuneResult:
    head_params: Dict[str, Tensor]
    head_state: Dict[str, np.ndarray]
    history: List[Tuple[int, float, float, float, int]]
    best_epoch: int
    encoder_params: Optional[Dict[str, Tensor]] = None


def _flip_tile(tile: np.ndarray, fh: bool, fv: bool) -> np.ndarray:
    if fv:
        tile = tile[..., ::-1, :]
    if fh:
        tile = tile[..., :, ::-1]
    return np.ascontiguousarray(tile)


def _flip_mask(mask: np.ndarray, fh: bool, fv: bool) -> np.ndarray:
    if fv:
        mask = mask[::-1, :]
    if fh:
        mask = mask[:, ::-1]
    return np.ascontiguousarray(mask)


class _EncoderCache:
    """Per-(tile, flip) cache of encoder tap/final token arrays."""

    def __init__(self, cfg: vit.EncoderConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._store: Dict[tuple, list] = {}
        self.grid = None

    def tokens(self, idx: int, tile: np.ndarray, fh: bool, fv: bool):
        key = (idx, fh, fv)
        hit = self._store.get(key)
        if hit is None:
            cube = Tensor(_flip_tile(tile, fh, fv)[None].astype(np.float32))
            out = vit.encode(cube, self.cfg, self.params)
            self.grid = out.final.grid
            hit = [t.tokens.data for t in out.taps] + [out.final.tokens.data]
            self._store[key] = hit
        return hit

    def batch_output(self, entries) -> vit.EncoderOutput:
        stacked = [np.concatenate([e[i] for e in entries], axis=0)
                   for i in range(len(entries[0]))]
        taps = [vit.TokenSequence(Tensor(s), self.grid) for s in stacked[:-1]]
        final = vit.TokenSequence(Tensor(stacked[-1]), self.grid)
        return vit.EncoderOutput(final, taps)


def _targets_for(record: TileRecord, head_spec: heads.HeadSpec,
                 fh: bool = False, fv: bool = False):
    if head_spec.kind == "mlp-classifier":
        if record.tile_label is None:
            raise ValueError("classification record without a tile label")
        return record.tile_label
    if record.mask is None:
        raise ValueError("segmentation/regression record without a mask")
    return _flip_mask(record.mask, fh, fv)


def _batch_targets(head_spec: heads.HeadSpec, targets):
    if head_spec.kind == "mlp-classifier":
        return np.asarray(targets, dtype=np.int64)
    if head_spec.kind == "upernet-regressor":
        arr = np.asarray(targets, dtype=np.float32)
        return arr[:, None]                    # (B,1,H,W) to match logits
    return np.asarray(targets, dtype=np.int64)


def evaluate_loss(enc_cfg, enc_params, head_spec, head_params, head_state,
                  records: Sequence[TileRecord], loss_spec: heads.LossSpec,
                  cache: Optional[_EncoderCache] = None,
                  batch_size: int = 16) -> float:
    """Mean loss over ``records`` in inference mode."""
    if cache is None:
        cache = _EncoderCache(enc_cfg, enc_params)
    losses, weights = [], []
    out_size = records[0].tile.shape[-2:]
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        entries = [cache.tokens(start + i, r.tile, False, False)
                   for i, r in enumerate(chunk)]
        enc_out = cache.batch_output(entries)
        logits = heads.head_forward(head_spec, enc_out, head_params, head_state,
                                    out_size=out_size, train=False)
        targets = _batch_targets(head_spec,
                                 [_targets_for(r, head_spec) for r in chunk])
        try:
            loss = heads.compute_loss(loss_spec, logits, targets)
        except ValueError:
            continue                            # e.g. all-zero RMSE targets
        losses.append(loss.item())
        weights.append(len(chunk))
    if not losses:
        raise ValueError("no evaluable records")
    return float(np.average(losses, weights=weights))


def finetune(enc_cfg: vit.EncoderConfig, enc_params: Dict[str, Tensor],
             head_spec: heads.HeadSpec, head_params: Dict[str, Tensor],
             head_state: Dict[str, np.ndarray],
             train_records: Sequence[TileRecord],
             val_records: Sequence[TileRecord],
             cfg: TrainConfig, loss_spec: heads.LossSpec,
             sampler: Optional[SamplingPlan] = None,
             train_encoder: bool = False) -> FinetuneResult:
    """Train a head against a frozen encoder; returns the best-val head."""
    shuffle_rng = stream(cfg.seed, "finetune/shuffle")
    drop_rng = stream(cfg.seed, "finetune/dropout")
    aug_rng = stream(cfg.seed, "finetune/augment")

    n = len(train_records)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    opt = Adam()
    h_params = dict(head_params)
    h_state = dict(head_state)
    e_params = dict(enc_params)
    cache = None if train_encoder else _EncoderCache(enc_cfg, e_params)
    val_cache = None if train_encoder else _EncoderCache(enc_cfg, e_params)
    out_size = train_records[0].tile.shape[-2:]

    history: List[Tuple[int, float, float, float, int]] = []
    best_val = np.inf
    best_epoch = -1
    best_params: Dict[str, Tensor] = dict(h_params)
    best_state: Dict[str, np.ndarray] = dict(h_state)
    best_enc = dict(e_params)
    stall = 0
    step = 0

    for epoch in range(cfg.epochs):
        if sampler is not None:
            order = draw_epoch(sampler, n, shuffle_rng)
        else:
            order = shuffle_rng.permutation(n)
        epoch_losses = []
        lr = cfg.base_lr
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            fh = bool(cfg.augment_hflip and aug_rng.random() < 0.5)
            fv = bool(cfg.augment_vflip and aug_rng.random() < 0.5)
            chunk = [train_records[i] for i in idx]
            targets = _batch_targets(
                head_spec, [_targets_for(r, head_spec, fh, fv) for r in chunk])
            tape = Tape()
            with recording(tape):
                if train_encoder:
                    tiles = np.stack([_flip_tile(r.tile, fh, fv) for r in chunk])
                    enc_out = vit.encode(Tensor(tiles.astype(np.float32)),
                                         enc_cfg, e_params, train=True,
                                         rng=drop_rng)
                else:
                    entries = [cache.tokens(int(i), train_records[int(i)].tile,
                                            fh, fv) for i in idx]
                    enc_out = cache.batch_output(entries)
                logits = heads.head_forward(head_spec, enc_out, h_params,
                                            h_state, out_size=out_size,
                                            train=True, rng=drop_rng)
                try:
                    loss = heads.compute_loss(loss_spec, logits, targets)
                except ValueError:
                    continue
            val = loss.item()
            if not np.isfinite(val):
                raise TensorError(f"non-finite training loss at epoch {epoch}")
            lr = warmup_cosine_lr(step, total_steps, cfg.base_lr,
                                  cfg.warmup_fraction)
            trainable = dict(h_params)
            if train_encoder:
                trainable.update({f"enc::{k}": v for k, v in e_params.items()})
            grads = backward(tape, loss, params=list(trainable.values()))
            by_name = {name: grads[p].data for name, p in trainable.items()}
            updated = opt.step(trainable, by_name, lr=lr)
            h_params = {k: v for k, v in updated.items()
                        if not k.startswith("enc::")}
            if train_encoder:
                e_params = {k[len("enc::"):]: v for k, v in updated.items()
                            if k.startswith("enc::")}
            epoch_losses.append(val)
            step += 1

        train_loss = float(np.mean(epoch_losses)) if epoch_losses else np.nan
        val_loss = evaluate_loss(enc_cfg, e_params, head_spec, h_params,
                                 h_state, val_records, loss_spec,
                                 cache=val_cache)
        history.append((epoch, train_loss, val_loss, lr, 0))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = dict(h_params)
            best_state = dict(h_state)
            best_enc = dict(e_params)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    history = [(e, tl, vl, lr, 1 if e == best_epoch else 0)
               for e, tl, vl, lr, _ in history]
    return FinetuneResult(best_params, best_state, history, best_epoch,
                          encoder_params=best_enc if train_encoder else None)


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss,lr,selected"]
    lines += [f"{e},{tl:.8g},{vl:.8g},{lr:.8g},{sel}"
              for e, tl, vl, lr, sel in history]
    return "\n".join(lines) + "\n"
