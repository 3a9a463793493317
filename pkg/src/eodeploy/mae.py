"""Dual-MAE distillation.

A frozen teacher MAE runs at 0% masking and produces reference
reconstructions; a student MAE runs at 75% masking and is trained so its
reconstructions match the teacher's at the masked positions.  After
training the decoder is discarded and the student encoder retained.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops, vit
from .optim import Adam, warmup_cosine_lr
from .rng import stream
from .tensor import FP32, Tape, Tensor, TensorError, backward, recording


@dataclass
class MaskPlan:
    """Partition of patch indices into masked and visible sets."""

    n: int
    masked: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.masked = np.asarray(sorted(self.masked), dtype=np.intp)
        self.visible = np.asarray(sorted(self.visible), dtype=np.intp)
        union = np.union1d(self.masked, self.visible)
        if len(self.masked) + len(self.visible) != self.n or \
                union.size != self.n or (self.n and (union[0] != 0 or union[-1] != self.n - 1)):
            raise ValueError("masked/visible sets must partition 0..N-1")


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform without-replacement mask of round(ratio*N) patches."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0,1)")
    k = round(ratio * n)
    perm = rng.permutation(n)
    return MaskPlan(n, perm[:k], perm[k:])


def full_visibility(n: int) -> MaskPlan:
    """Teacher-mode plan: nothing masked."""
    return MaskPlan(n, np.empty(0, dtype=np.intp), np.arange(n))


# ---------------------------------------------------------------------------
# model

def decoder_dim(encoder_dim: int) -> int:
    return max(encoder_dim // 2, 16)


def _decoder_heads(dd: int) -> int:
    for h in (4, 2, 1):
        if dd % h == 0:
            return h
    return 1


def decoder_config(cfg: vit.EncoderConfig) -> vit.EncoderConfig:
    """Single-block decoder at half the encoder width (min 16)."""
    dd = decoder_dim(cfg.dim)
    return vit.EncoderConfig(bands=cfg.bands, temporal=cfg.temporal,
                             patch=cfg.patch, dim=dd, depth=1,
                             heads=_decoder_heads(dd), mlp_ratio=cfg.mlp_ratio,
                             dropout=0.0)


def init_mae_params(cfg: vit.EncoderConfig,
                    rng: np.random.Generator) -> Dict[str, Tensor]:
    """Encoder weights plus decoder projection, mask token, block, head."""
    def p(arr):
        return Tensor(np.asarray(arr, dtype=np.float32), dtype=FP32,
                      requires_grad=True)

    params = vit.init_encoder_params(cfg, rng)
    dcfg = decoder_config(cfg)
    dd = dcfg.dim
    params["dec/proj/w"] = p(vit.trunc_normal(rng, (cfg.dim, dd)))
    params["dec/proj/b"] = p(np.zeros(dd))
    params["dec/mask_token"] = p(vit.trunc_normal(rng, (1, dd)))
    dec_block = vit.init_encoder_params(dcfg, rng)
    for k, v in dec_block.items():
        if k.startswith("block0"):
            params[f"dec/{k}"] = v
    params["dec/head/w"] = p(vit.trunc_normal(rng, (dd, cfg.patch_dim)))
    params["dec/head/b"] = p(np.zeros(cfg.patch_dim))
    return params


def encoder_param_names(params: Dict[str, Tensor]) -> List[str]:
    return [k for k in params if not k.startswith("dec/")]


def mae_forward(cfg: vit.EncoderConfig, params: Dict[str, Tensor],
                cube: Tensor, plan: MaskPlan) -> Tensor:
    """Masked-autoencoder pass: reconstruction of all N patches.

    Only visible patch embeddings (plus the class token) reach the
    encoder; learnable mask tokens stand in for masked patches before the
    decoder, which sees positional encodings on every token.
    Returns (B, N, patch_dim).
    """
    b, c, t, h, w = cube.shape
    grid = cfg.grid(h, w)
    n = grid[0] * grid[1] * grid[2]
    if plan.n != n:
        raise ValueError(f"mask plan covers {plan.n} patches, cube has {n}")

    patches = vit.patchify(cube, cfg)
    visible = ops.gather(patches, plan.visible, axis=1)
    tok = ops.bias_add(ops.matmul(visible, params["embed/w"]), params["embed/b"])
    pos = vit.sincos_posenc_3d(grid, cfg.dim).astype(np.float32)
    tok = ops.bias_add(tok, Tensor(pos[1 + plan.visible]))
    cls = ops.bias_add(Tensor(np.zeros((b, 1, cfg.dim), dtype=np.float32)),
                       params["cls_token"])
    cls = ops.bias_add(cls, Tensor(pos[:1]))
    x = ops.concat([cls, tok], axis=1)
    for i in range(cfg.depth):
        x = vit.transformer_block(x, params, f"block{i}", cfg)

    # decoder: project, re-insert mask tokens, add positions, one block
    dcfg = decoder_config(cfg)
    dd = dcfg.dim
    xd = ops.bias_add(ops.matmul(x, params["dec/proj/w"]), params["dec/proj/b"])
    cls_d = ops.gather(xd, [0], axis=1)
    vis_d = ops.gather(xd, 1 + np.arange(len(plan.visible)), axis=1)
    seq = ops.scatter(vis_d, plan.visible, axis=1, size=n)
    if len(plan.masked):
        mask_tok = ops.bias_add(
            Tensor(np.zeros((b, len(plan.masked), dd), dtype=np.float32)),
            params["dec/mask_token"])
        seq = ops.add(seq, ops.scatter(mask_tok, plan.masked, axis=1, size=n))
    seq = ops.concat([cls_d, seq], axis=1)
    dpos = vit.sincos_posenc_3d(grid, dd).astype(np.float32)
    seq = ops.bias_add(seq, Tensor(dpos))
    dec_params = {k[len("dec/"):]: v for k, v in params.items()
                  if k.startswith("dec/block0")}
    seq = vit.transformer_block(seq, dec_params, "block0", dcfg)
    patch_rows = ops.gather(seq, 1 + np.arange(n), axis=1)
    return ops.bias_add(ops.matmul(patch_rows, params["dec/head/w"]),
                        params["dec/head/b"])


def distill_loss(student_rec: Tensor, teacher_rec: Tensor,
                 plan: MaskPlan) -> Tensor:
    """MSE over masked rows only."""
    if student_rec.shape != teacher_rec.shape:
        raise ValueError(f"reconstruction shapes differ: {student_rec.shape} "
                         f"vs {teacher_rec.shape}")
    if len(plan.masked) == 0:
        raise ValueError("distill loss undefined with an empty masked set")
    s = ops.gather(student_rec, plan.masked, axis=1)
    t = ops.gather(teacher_rec, plan.masked, axis=1)
    return ops.mse(s, t)


# ---------------------------------------------------------------------------
# training

@dataclass
class DistillConfig:
    steps: int = 200
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    student_mask_ratio: float = 0.75
    teacher_mask_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.teacher_mask_ratio != 0.0:
            raise ValueError("teacher runs unmasked (0% mask ratio)")
        if not 0.0 <= self.student_mask_ratio < 1.0:
            raise ValueError(f"mask ratio {self.student_mask_ratio} outside [0,1)")


@dataclass
class DistillResult:
    encoder_params: Dict[str, Tensor]
    history: List[Tuple[int, float, float]]          # (step, loss, lr)
    full_params: Dict[str, Tensor]


def weights_checksum(params: Dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


def train_distill(teacher_cfg: vit.EncoderConfig,
                  teacher_params: Dict[str, Tensor],
                  student_cfg: vit.EncoderConfig,
                  student_params: Dict[str, Tensor],
                  cubes: np.ndarray,
                  cfg: DistillConfig,
                  target: str = "teacher") -> DistillResult:
    """Train the student MAE against frozen teacher reconstructions.

    ``target="pixels"`` trains a plain MAE against raw patch pixels
    instead (the comparison arm); the teacher is then unused.
    Aborts with the step index if the loss goes non-finite.
    """
    cubes = np.asarray(cubes, dtype=np.float32)
    m = cubes.shape[0]
    n = student_cfg.tokens(cubes.shape[3], cubes.shape[4])

    teacher_recs = None
    if target == "teacher":
        plan_full = full_visibility(n)
        recs = []
        for i in range(m):
            rec = mae_forward(teacher_cfg, teacher_params,
                              Tensor(cubes[i:i + 1]), plan_full)
            recs.append(rec.data)
        teacher_recs = np.concatenate(recs, axis=0)
    elif target != "pixels":
        raise ValueError(f"unknown distillation target '{target}'")

    batch_rng = stream(cfg.seed, "distill/batch")
    mask_rng = stream(cfg.seed, "distill/mask")
    opt = Adam()
    params = dict(student_params)
    history: List[Tuple[int, float, float]] = []

    for step in range(cfg.steps):
        idx = batch_rng.choice(m, size=min(cfg.batch_size, m), replace=False)
        plan = sample_mask(n, cfg.student_mask_ratio, mask_rng)
        batch = Tensor(cubes[idx])
        tape = Tape()
        with recording(tape):
            rec = mae_forward(student_cfg, params, batch, plan)
            if target == "teacher":
                ref = Tensor(teacher_recs[idx])
            else:
                ref = Tensor(vit.patchify(Tensor(cubes[idx]), student_cfg).data)
            loss = distill_loss(rec, ref, plan)
        val = loss.item()
        if not np.isfinite(val):
            raise TensorError(f"non-finite distillation loss at step {step}")
        lr = warmup_cosine_lr(step, cfg.steps, cfg.base_lr, cfg.warmup_fraction)
        grads = backward(tape, loss, params=list(params.values()))
        by_name = {name: grads[p].data for name, p in params.items()}
        params = opt.step(params, by_name, lr=lr)
        history.append((step, val, lr))

    encoder = {k: v for k, v in params.items() if not k.startswith("dec/")}
    return DistillResult(encoder, history, params)


def smoothed_endpoints(history, window: int = 20) -> Tuple[float, float]:
    """Mean loss over the first and last ``window`` steps."""
    losses = [h[1] for h in history]
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def history_csv(history) -> str:
    lines = ["step,loss,learning_rate"]
    lines += [f"{s},{l:.8g},{lr:.8g}" for s, l, lr in history]
    return "\n".join(lines) + "\n"
