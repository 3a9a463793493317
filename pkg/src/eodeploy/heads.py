"""Downstream task heads and their losses.

Four head families share a frozen ViT encoder: an MLP tile classifier on
the class token, a UNet-style decoder and a UPerNet-style decoder (plus
its single-channel regression variant) on the four patch-token taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops, vit
from .tensor import FP32, ShapeError, Tensor

HEAD_KINDS = ("mlp-classifier", "unet-decoder", "upernet-decoder",
              "upernet-regressor")


@dataclass
class HeadSpec:
    kind: str = "mlp-classifier"
    classes: int = 2                 # output channels; forced to 1 for regressor
    hidden: int = 256                # MLP hidden width
    width: int = 64                  # decoder stage channel width
    dropout: float = 0.1
    ppm_scales: Tuple[int, ...] = (1, 2, 3, 6)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind '{self.kind}'")
        if self.kind == "upernet-regressor":
            self.classes = 1
        self.ppm_scales = tuple(self.ppm_scales)


@dataclass
class LossSpec:
    kind: str = "weighted-cross-entropy"
    class_weights: Tuple[float, ...] = (1.0, 1.0)
    ignore: int = -1

    def __post_init__(self):
        if self.kind not in ("weighted-cross-entropy", "masked-rmse"):
            raise ValueError(f"unknown loss kind '{self.kind}'")
        if self.kind == "weighted-cross-entropy":
            if any(w <= 0 for w in self.class_weights):
                raise ValueError("class weights must be strictly positive")
            if 0 <= self.ignore < len(self.class_weights):
                raise ValueError("ignore value collides with a valid class")


# ---------------------------------------------------------------------------
# parameter initialization

def _p(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), dtype=FP32,
                  requires_grad=True)


def _conv_init(rng, cout, cin, kh, kw):
    fan_in = cin * kh * kw
    return _p(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, kh, kw)))


def _convT_init(rng, cin, cout, kh, kw):
    fan_in = cin * kh * kw
    return _p(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cin, cout, kh, kw)))


def _add_conv(params, state, rng, name, cout, cin, k, bn: bool = True):
    params[f"{name}/w"] = _conv_init(rng, cout, cin, k, k)
    params[f"{name}/b"] = _p(np.zeros(cout))
    if bn:
        params[f"{name}/bn/g"] = _p(np.ones(cout))
        params[f"{name}/bn/b"] = _p(np.zeros(cout))
        state[f"{name}/bn/mean"] = np.zeros(cout, dtype=np.float32)
        state[f"{name}/bn/var"] = np.ones(cout, dtype=np.float32)


def _num_up_stages(patch_hw: int) -> int:
    n = int(round(math.log2(patch_hw)))
    if 2 ** n != patch_hw:
        raise ShapeError(f"UNet decoder needs a power-of-two patch, got {patch_hw}")
    return n


def init_head_params(spec: HeadSpec, enc_cfg: vit.EncoderConfig,
                     rng: np.random.Generator, grid_hw: Optional[int] = None):
    """Returns (params, state): trainable tensors and batch-norm buffers.

    UPerNet kinds need ``grid_hw`` (patch-grid side length) because their
    PPM upsampling kernels are sized grid - scale + 1.
    """
    d = enc_cfg.dim
    wch = spec.width
    params: Dict[str, Tensor] = {}
    state: Dict[str, np.ndarray] = {}

    if spec.kind == "mlp-classifier":
        params["fc1/w"] = _p(vit.trunc_normal(rng, (d, spec.hidden)))
        params["fc1/b"] = _p(np.zeros(spec.hidden))
        params["fc2/w"] = _p(vit.trunc_normal(rng, (spec.hidden, spec.classes)))
        params["fc2/b"] = _p(np.zeros(spec.classes))
        return params, state

    if spec.kind == "unet-decoder":
        n_up = _num_up_stages(enc_cfg.patch[1])
        params["in_proj/w"] = _conv_init(rng, wch, d, 1, 1)
        params["in_proj/b"] = _p(np.zeros(wch))
        for i in range(1, n_up + 1):
            params[f"up{i}/w"] = _convT_init(rng, wch, wch, 2, 2)
            params[f"up{i}/b"] = _p(np.zeros(wch))
            if i < n_up:
                # skip path: 1x1 lateral projection then transposed-conv upsample
                params[f"skip{i}/lat/w"] = _conv_init(rng, wch, d, 1, 1)
                params[f"skip{i}/lat/b"] = _p(np.zeros(wch))
                f = 2 ** i
                params[f"skip{i}/up/w"] = _convT_init(rng, wch, wch, f, f)
                params[f"skip{i}/up/b"] = _p(np.zeros(wch))
                _add_conv(params, state, rng, f"stage{i}/conv1", wch, 2 * wch, 3)
                _add_conv(params, state, rng, f"stage{i}/conv2", wch, wch, 3)
        params["out/w"] = _conv_init(rng, spec.classes, wch, 1, 1)
        params["out/b"] = _p(np.zeros(spec.classes))
        return params, state

    # upernet-decoder / upernet-regressor
    for i in range(4):
        params[f"lat{i}/w"] = _conv_init(rng, wch, d, 1, 1)
        params[f"lat{i}/b"] = _p(np.zeros(wch))
        if i < 3:
            _add_conv(params, state, rng, f"fpn{i}", wch, wch, 3)
    for s in spec.ppm_scales:
        params[f"ppm{s}/w"] = _conv_init(rng, wch, wch, 1, 1)
        params[f"ppm{s}/b"] = _p(np.zeros(wch))
    _add_conv(params, state, rng, "ppm_fuse", wch,
              wch * (1 + len(spec.ppm_scales)), 3)
    _add_conv(params, state, rng, "fuse", wch, 4 * wch, 3)
    params["out/w"] = _conv_init(rng, spec.classes, wch, 1, 1)
    params["out/b"] = _p(np.zeros(spec.classes))
    if grid_hw is None:
        raise ValueError("upernet heads need grid_hw at init (PPM kernel sizes)")
    for s in spec.ppm_scales:
        # transposed-conv upsampler from s x s back to grid_hw x grid_hw
        k = grid_hw - s + 1
        params[f"ppm{s}/up/w"] = _convT_init(rng, spec.width, spec.width, k, k)
        params[f"ppm{s}/up/b"] = _p(np.zeros(spec.width))
    return params, state


# ---------------------------------------------------------------------------
# forward passes

def taps_to_maps(taps: List[vit.TokenSequence]) -> Tuple[List[Tensor], int]:
    """Drop class tokens and reshape patch tokens to (B, D, g, g) maps."""
    maps = []
    g = None
    for tap in taps:
        nt, nh, nw = tap.grid
        if nt != 1:
            raise ShapeError("decoder heads support temporal depth 1 only")
        if nh != nw:
            raise ShapeError(f"decoder heads need a square patch grid, got "
                             f"{nh}x{nw}")
        g = nh
        b, n1, d = tap.tokens.shape
        patch = ops.gather(tap.tokens, 1 + np.arange(n1 - 1), axis=1)
        patch = ops.permute(ops.reshape(patch, (b, nh, nw, d)), (0, 3, 1, 2))
        maps.append(patch)
    return maps, g


_BN_MOMENTUM = 0.1


def _conv_bn_relu_tracked(x, params, state, name, train):
    y = ops.conv2d(x, params[f"{name}/w"], params[f"{name}/b"], padding=1)
    if f"{name}/bn/g" in params:
        if train:
            xv = y.data
            mu = xv.mean(axis=(0, 2, 3))
            var = xv.var(axis=(0, 2, 3))
            state[f"{name}/bn/mean"] = ((1 - _BN_MOMENTUM) * state[f"{name}/bn/mean"]
                                        + _BN_MOMENTUM * mu).astype(np.float32)
            state[f"{name}/bn/var"] = ((1 - _BN_MOMENTUM) * state[f"{name}/bn/var"]
                                       + _BN_MOMENTUM * var).astype(np.float32)
            y = ops.batch_norm(y, params[f"{name}/bn/g"], params[f"{name}/bn/b"])
        else:
            y = ops.batch_norm(y, params[f"{name}/bn/g"], params[f"{name}/bn/b"],
                               running_mean=state[f"{name}/bn/mean"],
                               running_var=state[f"{name}/bn/var"])
    return ops.relu(y)


def mlp_classify(class_token: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """(B, D) class tokens -> (B, classes) logits."""
    if class_token.shape[-1] != params["fc1/w"].shape[0]:
        raise ShapeError(f"class token width {class_token.shape[-1]} != "
                         f"classifier input {params['fc1/w'].shape[0]}")
    h = ops.relu(ops.bias_add(ops.matmul(class_token, params["fc1/w"]),
                              params["fc1/b"]))
    return ops.bias_add(ops.matmul(h, params["fc2/w"]), params["fc2/b"])


def predict_label(logits: Tensor) -> np.ndarray:
    """Argmax with ties broken toward the lower class index.

    Accepts (B, K) classifier logits or (B, K, H, W) decoder logits.
    """
    axis = 1 if logits.data.ndim == 4 else -1
    return np.argmax(logits.data, axis=axis)


def unet_decode(taps: List[vit.TokenSequence], spec: HeadSpec,
                params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                out_size: Tuple[int, int], train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """UNet-style decoder over the four tap maps -> (B, classes, H, W).

    Doubling transposed convolutions; the first stages mix in lateral
    skip projections of the shallower taps, the final stage is a
    transposed convolution plus a 1x1 convolution.  Dropout after every
    non-final stage.
    """
    maps, g = taps_to_maps(taps)
    h, w = out_size
    n_up = _num_up_stages(h // g)
    if g * 2 ** n_up != h or h != w:
        raise ShapeError(f"cannot reach {out_size} from grid {g} by doubling")
    x = ops.conv2d(maps[3], params["in_proj/w"], params["in_proj/b"])
    skip_sources = [maps[2], maps[1], maps[0]]
    for i in range(1, n_up + 1):
        x = ops.conv_transpose2d(x, params[f"up{i}/w"], params[f"up{i}/b"],
                                 stride=2)
        if i < n_up:
            src = skip_sources[(i - 1) % 3]
            skip = ops.conv2d(src, params[f"skip{i}/lat/w"],
                              params[f"skip{i}/lat/b"])
            f = 2 ** i
            skip = ops.conv_transpose2d(skip, params[f"skip{i}/up/w"],
                                        params[f"skip{i}/up/b"], stride=f)
            x = ops.concat([x, skip], axis=1)
            x = _conv_bn_relu_tracked(x, params, state, f"stage{i}/conv1", train)
            x = _conv_bn_relu_tracked(x, params, state, f"stage{i}/conv2", train)
            x = ops.dropout(x, spec.dropout, rng=rng, train=train)
    return ops.conv2d(x, params["out/w"], params["out/b"])


def upernet_decode(taps: List[vit.TokenSequence], spec: HeadSpec,
                   params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                   out_size: Tuple[int, int], train: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """UPerNet-style decoder: PPM on the deepest tap, FPN over all four,
    bilinear upsample to out_size, 1x1 projection to the output channels."""
    maps, g = taps_to_maps(taps)
    top = ops.conv2d(maps[3], params["lat3/w"], params["lat3/b"])
    branches = [top]
    for s in spec.ppm_scales:
        if s > g:
            raise ShapeError(f"PPM scale {s} exceeds grid size {g}")
        pooled = ops.adaptive_avg_pool2d(top, (s, s))
        proj = ops.relu(ops.conv2d(pooled, params[f"ppm{s}/w"],
                                   params[f"ppm{s}/b"]))
        up = ops.conv_transpose2d(proj, params[f"ppm{s}/up/w"],
                                  params[f"ppm{s}/up/b"], stride=1)
        branches.append(up)
    x = ops.concat(branches, axis=1)
    top_fused = _conv_bn_relu_tracked(x, params, state, "ppm_fuse", train)

    feats = [top_fused]
    for i in range(3):
        lat = ops.conv2d(maps[i], params[f"lat{i}/w"], params[f"lat{i}/b"])
        feats.append(_conv_bn_relu_tracked(lat, params, state, f"fpn{i}", train))
    fused = _conv_bn_relu_tracked(ops.concat(feats, axis=1), params, state,
                                  "fuse", train)
    fused = ops.dropout(fused, spec.dropout, rng=rng, train=train)
    up = ops.resize_bilinear(fused, out_size)
    return ops.conv2d(up, params["out/w"], params["out/b"])


def head_forward(spec: HeadSpec, enc_out: vit.EncoderOutput,
                 params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                 out_size: Optional[Tuple[int, int]] = None,
                 train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    if spec.kind == "mlp-classifier":
        cls = ops.reshape(ops.gather(enc_out.final.tokens, [0], axis=1),
                          (enc_out.final.tokens.shape[0], -1))
        return mlp_classify(cls, params)
    if out_size is None:
        raise ValueError("decoder heads need an explicit out_size")
    if spec.kind == "unet-decoder":
        return unet_decode(enc_out.taps, spec, params, state, out_size,
                           train=train, rng=rng)
    return upernet_decode(enc_out.taps, spec, params, state, out_size,
                          train=train, rng=rng)


# ---------------------------------------------------------------------------
# losses

def weighted_cross_entropy(logits: Tensor, targets, spec: LossSpec) -> Tensor:
    """Segmentation logits (B,K,H,W) or classification logits (B,K)."""
    t = np.asarray(targets)
    if logits.data.ndim == 4:
        b, k, h, w = logits.shape
        flat = ops.reshape(ops.permute(logits, (0, 2, 3, 1)), (b * h * w, k))
        return ops.weighted_cross_entropy(flat, t.reshape(-1),
                                          spec.class_weights, spec.ignore)
    return ops.weighted_cross_entropy(logits, t.reshape(-1),
                                      spec.class_weights, spec.ignore)


def masked_rmse(pred: Tensor, target) -> Tensor:
    """Per-image RMSE over pixels whose target is nonzero."""
    t = np.asarray(target, dtype=np.float32)
    if pred.shape != t.shape:
        raise ShapeError(f"masked_rmse: shapes {pred.shape} vs {t.shape}")
    mask = (t != 0).astype(np.float32)
    count = mask.sum()
    if count == 0:
        raise ValueError("masked_rmse undefined for an all-zero target")
    diff = ops.mul(ops.sub(pred, Tensor(t)), Tensor(mask))
    sq = ops.reduce_sum(ops.mul(diff, diff))
    return ops.sqrt(ops.scale(sq, 1.0 / float(count)))


def batch_masked_rmse(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of per-image masked RMSEs over a (B,1,H,W) prediction batch."""
    b = pred.shape[0]
    per_image = []
    for i in range(b):
        t = targets[i]
        if not np.any(t):
            continue                                   # image skipped by contract
        p = ops.reshape(ops.gather(pred, [i], axis=0), t.shape)
        per_image.append(masked_rmse(p, t))
    if not per_image:
        raise ValueError("every target in the batch is all-zero")
    total = per_image[0]
    for r in per_image[1:]:
        total = ops.add(total, r)
    return ops.scale(total, 1.0 / len(per_image))


def compute_loss(loss_spec: LossSpec, logits: Tensor, targets) -> Tensor:
    if loss_spec.kind == "weighted-cross-entropy":
        return weighted_cross_entropy(logits, targets, loss_spec)
    return batch_masked_rmse(logits, np.asarray(targets, dtype=np.float32))
