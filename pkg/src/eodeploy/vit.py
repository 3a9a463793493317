"""ViT encoder: patchify, token embedding, 3D sin-cos positions, pre-norm
transformer blocks, and per-layer feature taps for decoder heads.

Shared by the teacher and student models; the student differs only in its
embedding dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import FP32, ShapeError, Tensor


@dataclass
class EncoderConfig:
    bands: int = 4
    temporal: int = 1
    patch: Tuple[int, int, int] = (1, 8, 8)
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.0
    tap_layers: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError(f"dropout {self.dropout} outside [0,1)")
        if self.tap_layers is None:
            L = self.depth
            self.tap_layers = (max(1, -(-L // 4)), max(1, -(-L // 2)),
                               max(1, -(-3 * L // 4)), L)
        self.tap_layers = tuple(self.tap_layers)
        if len(self.tap_layers) != 4:
            raise ShapeError("tap_layers must name exactly 4 layers")
        if any(t < 1 or t > self.depth for t in self.tap_layers):
            raise ShapeError(f"tap_layers {self.tap_layers} outside 1..{self.depth}")
        if any(b > a for a, b in zip(self.tap_layers[1:], self.tap_layers[:-1])):
            raise ShapeError(f"tap_layers {self.tap_layers} must be non-decreasing")

    @property
    def patch_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.bands

    def grid(self, h: int, w: int) -> Tuple[int, int, int]:
        pt, ph, pw = self.patch
        for name, extent, p in (("T", self.temporal, pt), ("H", h, ph), ("W", w, pw)):
            if extent % p:
                raise ShapeError(f"axis {name}={extent} not divisible by patch {p}")
        return self.temporal // pt, h // ph, w // pw

    def tokens(self, h: int, w: int) -> int:
        nt, nh, nw = self.grid(h, w)
        return nt * nh * nw

    @property
    def mlp_dim(self) -> int:
        return self.dim * self.mlp_ratio


@dataclass
class TokenSequence:
    tokens: Tensor                    # (B, N+1, D); row 0 is the class token
    grid: Tuple[int, int, int]


@dataclass
class EncoderOutput:
    final: TokenSequence
    taps: List[TokenSequence] = field(default_factory=list)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_encoder_params(cfg: EncoderConfig,
                        rng: np.random.Generator) -> Dict[str, Tensor]:
    """Fresh encoder weights: truncated-normal projections, zero biases."""
    def p(arr):
        return Tensor(np.asarray(arr, dtype=np.float32), dtype=FP32,
                      requires_grad=True)

    d = cfg.dim
    params: Dict[str, Tensor] = {
        "embed/w": p(trunc_normal(rng, (cfg.patch_dim, d))),
        "embed/b": p(np.zeros(d)),
        "cls_token": p(trunc_normal(rng, (1, d))),
    }
    for i in range(cfg.depth):
        pre = f"block{i}"
        params[f"{pre}/ln1/g"] = p(np.ones(d))
        params[f"{pre}/ln1/b"] = p(np.zeros(d))
        for proj in ("q", "k", "v", "out"):
            params[f"{pre}/attn/{proj}/w"] = p(trunc_normal(rng, (d, d)))
            params[f"{pre}/attn/{proj}/b"] = p(np.zeros(d))
        params[f"{pre}/ln2/g"] = p(np.ones(d))
        params[f"{pre}/ln2/b"] = p(np.zeros(d))
        params[f"{pre}/mlp/fc1/w"] = p(trunc_normal(rng, (d, cfg.mlp_dim)))
        params[f"{pre}/mlp/fc1/b"] = p(np.zeros(cfg.mlp_dim))
        params[f"{pre}/mlp/fc2/w"] = p(trunc_normal(rng, (cfg.mlp_dim, d)))
        params[f"{pre}/mlp/fc2/b"] = p(np.zeros(d))
    return params


# ---------------------------------------------------------------------------
# patch pipeline

def patchify(cube: Tensor, cfg: EncoderConfig) -> Tensor:
    """(B,C,T,H,W) -> (B, N, patch_dim); rows flatten patches in (C,t,h,w)
    order, patches enumerated row-major over the (t,h,w) grid."""
    if cube.data.ndim != 5:
        raise ShapeError(f"patchify expects (B,C,T,H,W), got {cube.shape}")
    b, c, t, h, w = cube.shape
    if c != cfg.bands or t != cfg.temporal:
        raise ShapeError(f"cube bands/temporal {(c, t)} do not match config "
                         f"{(cfg.bands, cfg.temporal)}")
    pt, ph, pw = cfg.patch
    nt, nh, nw = cfg.grid(h, w)
    x = ops.reshape(cube, (b, c, nt, pt, nh, ph, nw, pw))
    x = ops.permute(x, (0, 2, 4, 6, 1, 3, 5, 7))       # (B, nt, nh, nw, C, pt, ph, pw)
    return ops.reshape(x, (b, nt * nh * nw, cfg.patch_dim))


def unpatchify(patches: Tensor, cfg: EncoderConfig,
               grid: Tuple[int, int, int]) -> Tensor:
    """Exact inverse of patchify for the given grid."""
    nt, nh, nw = grid
    pt, ph, pw = cfg.patch
    b = patches.shape[0]
    x = ops.reshape(patches, (b, nt, nh, nw, cfg.bands, pt, ph, pw))
    x = ops.permute(x, (0, 4, 1, 5, 2, 6, 3, 7))
    return ops.reshape(x, (b, cfg.bands, nt * pt, nh * ph, nw * pw))


def _axis_sincos(positions: np.ndarray, d: int) -> np.ndarray:
    half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_posenc_3d(grid: Tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed (N+1) x D positional table; class-token row is all zeros.

    D is partitioned into three even per-axis shares of 2*floor(D/6)
    channels each; any remainder channels stay zero.
    """
    if dim < 6:
        raise ShapeError(f"posenc dim {dim} too small to split across 3 axes")
    nt, nh, nw = grid
    share = 2 * (dim // 6)
    tt, hh, ww = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw),
                             indexing="ij")
    n = nt * nh * nw
    table = np.zeros((n + 1, dim), dtype=np.float64)
    parts = [_axis_sincos(tt.reshape(-1).astype(float), share),
             _axis_sincos(hh.reshape(-1).astype(float), share),
             _axis_sincos(ww.reshape(-1).astype(float), share)]
    table[1:, :3 * share] = np.concatenate(parts, axis=1)
    return table


def embed(patches: Tensor, cfg: EncoderConfig, params: Dict[str, Tensor],
          grid: Tuple[int, int, int]) -> TokenSequence:
    """Linear projection, class token prepended, positions added."""
    if patches.shape[-1] != cfg.patch_dim:
        raise ShapeError(f"patch width {patches.shape[-1]} != projection input "
                         f"{cfg.patch_dim}")
    b = patches.shape[0]
    tok = ops.bias_add(ops.matmul(patches, params["embed/w"]), params["embed/b"])
    cls = ops.bias_add(Tensor(np.zeros((b, 1, cfg.dim), dtype=np.float32)),
                       params["cls_token"])
    seq = ops.concat([cls, tok], axis=1)
    pos = Tensor(sincos_posenc_3d(grid, cfg.dim).astype(np.float32))
    return TokenSequence(ops.bias_add(seq, pos), grid)


# ---------------------------------------------------------------------------
# transformer blocks

def _linear(x: Tensor, params: Dict[str, Tensor], name: str) -> Tensor:
    return ops.bias_add(ops.matmul(x, params[f"{name}/w"]), params[f"{name}/b"])


def attention(x: Tensor, params: Dict[str, Tensor], prefix: str,
              heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention."""
    b, s, d = x.shape
    dh = d // heads

    def split(t):
        t = ops.reshape(t, (b, s, heads, dh))
        return ops.permute(t, (0, 2, 1, 3))            # (B, heads, S, dh)

    q = split(_linear(x, params, f"{prefix}/q"))
    k = split(_linear(x, params, f"{prefix}/k"))
    v = split(_linear(x, params, f"{prefix}/v"))
    scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), dh ** -0.5)
    weights = ops.softmax(scores, axis=-1)
    mixed = ops.matmul(weights, v)
    mixed = ops.reshape(ops.permute(mixed, (0, 2, 1, 3)), (b, s, d))
    out = _linear(mixed, params, f"{prefix}/out")
    if return_weights:
        return out, weights
    return out


def transformer_block(seq: Tensor, params: Dict[str, Tensor], prefix: str,
                      cfg: EncoderConfig, train: bool = False,
                      rng: Optional[np.random.Generator] = None,
                      return_attn: bool = False):
    """Pre-norm MSA and MLP sub-blocks, each with a residual connection.

    MLP is fc1 -> GeLU -> fc2 with dropout after each fully connected
    layer in training mode.
    """
    h1 = ops.layer_norm(seq, params[f"{prefix}/ln1/g"], params[f"{prefix}/ln1/b"])
    attn_out = attention(h1, params, f"{prefix}/attn", cfg.heads,
                         return_weights=return_attn)
    if return_attn:
        attn_out, weights = attn_out
    x = ops.add(seq, attn_out)
    h2 = ops.layer_norm(x, params[f"{prefix}/ln2/g"], params[f"{prefix}/ln2/b"])
    m = ops.gelu(_linear(h2, params, f"{prefix}/mlp/fc1"))
    m = ops.dropout(m, cfg.dropout, rng=rng, train=train)
    m = _linear(m, params, f"{prefix}/mlp/fc2")
    m = ops.dropout(m, cfg.dropout, rng=rng, train=train)
    out = ops.add(x, m)
    if return_attn:
        return out, weights
    return out


def run_blocks(seq: TokenSequence, cfg: EncoderConfig,
               params: Dict[str, Tensor], train: bool = False,
               rng: Optional[np.random.Generator] = None) -> EncoderOutput:
    """Run all blocks, collecting the configured tap outputs."""
    taps_at = {}
    x = seq.tokens
    for i in range(cfg.depth):
        x = transformer_block(x, params, f"block{i}", cfg, train=train, rng=rng)
        taps_at[i + 1] = x
    taps = [TokenSequence(taps_at[layer], seq.grid) for layer in cfg.tap_layers]
    return EncoderOutput(TokenSequence(x, seq.grid), taps)


def encode(cube: Tensor, cfg: EncoderConfig, params: Dict[str, Tensor],
           train: bool = False,
           rng: Optional[np.random.Generator] = None) -> EncoderOutput:
    """Full encoder pass: patchify -> embed -> L blocks -> taps."""
    b, c, t, h, w = cube.shape
    grid = cfg.grid(h, w)
    patches = patchify(cube, cfg)
    seq = embed(patches, cfg, params, grid)
    return run_blocks(seq, cfg, params, train=train, rng=rng)
