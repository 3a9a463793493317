"""Differentiable primitives over the tensor engine.

Every public function here computes in FP32 (or FP64 when an operand is
FP64), appends a vector-Jacobian node to the active tape, and raises
``ShapeError`` with both offending shapes when operands do not conform.
``apply_primitive`` dispatches by primitive id for callers that drive the
engine generically.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import (FP64, ShapeError, Tensor, UnknownPrimitiveError,
                     as_compute, make_output)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op, a: Tensor, b: Tensor, fwd, vjp_a, vjp_b) -> Tensor:
    x, y = as_compute(a), as_compute(b)
    try:
        out = fwd(x, y)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    def vjp(g):
        return (_unbroadcast(vjp_a(g, x, y), a.shape),
                _unbroadcast(vjp_b(g, x, y), b.shape))
    return make_output(op, out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Alias of broadcasting add, kept as its own primitive id."""
    return _binary("bias_add", x, b, lambda p, q: p + q,
                   lambda g, p, q: g, lambda g, p, q: g)


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -as_compute(a), (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    return make_output("scale", as_compute(a) * c, (a,), lambda g: (g * c,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(as_compute(a))
    return make_output("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = as_compute(a), as_compute(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(x, y)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return make_output("matmul", out, (a, b), vjp)


def _reduce(op, a: Tensor, axis, keepdims: bool, use_mean: bool) -> Tensor:
    x = as_compute(a)
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    n = int(np.prod([x.shape[i] for i in axes])) if use_mean else 1
    out = x.mean(axis=axes, keepdims=keepdims) if use_mean \
        else x.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg / n, x.shape).copy(),)

    return make_output(op, np.asarray(out), (a,), vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("sum", a, axis, keepdims, use_mean=False)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("mean", a, axis, keepdims, use_mean=True)


# ---------------------------------------------------------------------------
# activations and normalizations

def relu(a: Tensor) -> Tensor:
    x = as_compute(a)
    mask = x > 0
    return make_output("relu", np.where(mask, x, 0.0), (a,),
                       lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GeLU."""
    x = as_compute(a)
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return make_output("gelu", out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = as_compute(a)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return make_output("softmax", y, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then affine-transform."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature width {d}")
    xv = as_compute(x)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv, bv = as_compute(gamma), as_compute(beta)
    out = xhat * gv + bv

    def vjp(g):
        dy = g * gv
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dy - m1 - xhat * m2)
        axes = tuple(range(xv.ndim - 1))
        return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return make_output("layer_norm", out, (x, gamma, beta), vjp)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None) -> Tensor:
    """Per-channel normalization of (B, C, H, W) features.

    With running statistics supplied (inference), normalizes with them;
    otherwise uses batch statistics over (B, H, W) and differentiates
    through them.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match channel count {c}")
    xv = as_compute(x)
    gv = as_compute(gamma).reshape(1, c, 1, 1)
    bv = as_compute(beta).reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    if running_mean is not None:
        mu = np.asarray(running_mean, dtype=xv.dtype).reshape(1, c, 1, 1)
        var = np.asarray(running_var, dtype=xv.dtype).reshape(1, c, 1, 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        out = xhat * gv + bv

        def vjp(g):
            return (g * gv * inv,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))
    else:
        mu = xv.mean(axis=axes, keepdims=True)
        var = xv.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        out = xhat * gv + bv

        def vjp(g):
            dy = g * gv
            m1 = dy.mean(axis=axes, keepdims=True)
            m2 = (dy * xhat).mean(axis=axes, keepdims=True)
            dx = inv * (dy - m1 - xhat * m2)
            return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return make_output("batch_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolutions

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv window {kh}x{kw} stride {stride} pad {pad} "
                         f"does not fit input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, oh, ow),
        (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return view.reshape(b, c * kh * kw, oh * ow), (oh, ow)


def _col2im(cols: np.ndarray, xshape: tuple, kh: int, kw: int,
            stride: int, pad: int) -> np.ndarray:
    b, c, h, w = xshape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation: x (B,Cin,H,W) with w (Cout,Cin,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    xv, wv = as_compute(x), as_compute(w)
    bsz, cin, _, _ = xv.shape
    cout, _, kh, kw = wv.shape
    cols, (oh, ow) = _im2col(xv, kh, kw, stride, padding)
    out = np.matmul(wv.reshape(cout, -1), cols).reshape(bsz, cout, oh, ow)
    bv = as_compute(b) if b is not None else None
    if bv is not None:
        if bv.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + bv.reshape(1, cout, 1, 1)

    def vjp(g):
        gm = g.reshape(bsz, cout, -1)
        dw = np.einsum("bop,bkp->ok", gm, cols).reshape(wv.shape)
        dcols = np.matmul(wv.reshape(cout, -1).T, gm)
        dx = _col2im(dcols, xv.shape, kh, kw, stride, padding)
        grads = [dx, dw]
        if bv is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv2d", out, inputs, vjp)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2D convolution: x (B,Cin,H,W) with w (Cin,Cout,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with "
                         f"kernel {w.shape}")
    xv, wv = as_compute(x), as_compute(w)
    bsz, cin, h, win = xv.shape
    _, cout, kh, kw = wv.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (win - 1) * stride - 2 * padding + kw
    cols = np.matmul(wv.reshape(cin, -1).T, xv.reshape(bsz, cin, h * win))
    out = _col2im(cols, (bsz, cout, oh, ow), kh, kw, stride, padding)
    bv = as_compute(b) if b is not None else None
    if bv is not None:
        if bv.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
        out = out + bv.reshape(1, cout, 1, 1)

    def vjp(g):
        gcols, _ = _im2col(g, kh, kw, stride, padding)
        dx = np.matmul(wv.reshape(cin, -1), gcols).reshape(xv.shape)
        dw = np.einsum("bip,bkp->ik", xv.reshape(bsz, cin, -1),
                       gcols).reshape(wv.shape)
        grads = [dx, dw]
        if bv is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv_transpose2d", out, inputs, vjp)


# ---------------------------------------------------------------------------
# pooling and resampling

def adaptive_avg_pool2d(x: Tensor, out_hw) -> Tensor:
    """Average-pool (B,C,H,W) into an out_hw grid of variable-size bins."""
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects (B,C,H,W), got {x.shape}")
    oh, ow = out_hw
    xv = as_compute(x)
    b, c, h, w = xv.shape
    hb = [(int(np.floor(i * h / oh)), int(np.ceil((i + 1) * h / oh))) for i in range(oh)]
    wb = [(int(np.floor(j * w / ow)), int(np.ceil((j + 1) * w / ow))) for j in range(ow)]
    out = np.empty((b, c, oh, ow), dtype=xv.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = xv[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def vjp(g):
        dx = np.zeros_like(xv)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += g[:, :, i, j, None, None] / area
        return (dx,)

    return make_output("adaptive_avg_pool2d", out, (x,), vjp)


def _bilinear_weights(n_in: int, n_out: int):
    # half-pixel-centre sampling
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    return lo, hi, frac


def resize_bilinear(x: Tensor, out_hw) -> Tensor:
    """Bilinear resize of (B,C,H,W) to out_hw (half-pixel centres)."""
    if x.data.ndim != 4:
        raise ShapeError(f"resize_bilinear expects (B,C,H,W), got {x.shape}")
    oh, ow = out_hw
    xv = as_compute(x)
    b, c, h, w = xv.shape
    hlo, hhi, hf = _bilinear_weights(h, oh)
    wlo, whi, wf = _bilinear_weights(w, ow)
    hf = hf[:, None]
    top = xv[:, :, hlo][:, :, :, wlo] * (1 - wf) + xv[:, :, hlo][:, :, :, whi] * wf
    bot = xv[:, :, hhi][:, :, :, wlo] * (1 - wf) + xv[:, :, hhi][:, :, :, whi] * wf
    out = top * (1 - hf) + bot * hf

    def vjp(g):
        dx = np.zeros_like(xv)
        gt = g * (1 - hf)
        gb = g * hf
        for rows, grad in ((hlo, gt), (hhi, gb)):
            np.add.at(dx, (slice(None), slice(None), rows[:, None], wlo[None, :]),
                      grad * (1 - wf))
            np.add.at(dx, (slice(None), slice(None), rows[:, None], whi[None, :]),
                      grad * wf)
        return (dx,)

    return make_output("resize_bilinear", out, (x,), vjp)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None,
            train: bool = True) -> Tensor:
    """Inverted-scaling dropout; identity when rate is 0 or not training."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate {rate} outside [0,1)")
    if rate == 0.0 or not train:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng stream")
    xv = as_compute(x)
    keep = (rng.random(xv.shape) >= rate) / (1.0 - rate)
    return make_output("dropout", xv * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape manipulation and indexing

def reshape(x: Tensor, shape) -> Tensor:
    xv = as_compute(x)
    try:
        out = xv.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    return make_output("reshape", out, (x,), lambda g: (g.reshape(xv.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = as_compute(x).transpose(axes)
    return make_output("permute", out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    views = [as_compute(t) for t in tensors]
    out = np.concatenate(views, axis=axis)
    sizes = [v.shape[axis] for v in views]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_output("concat", out, tuple(tensors), vjp)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    xv = as_compute(x)
    out = np.take(xv, idx, axis=axis)

    def vjp(g):
        dx = np.zeros_like(xv)
        sl = [slice(None)] * xv.ndim
        sl[axis] = idx
        np.add.at(dx, tuple(sl), g)
        return (dx,)

    return make_output("gather", out, (x,), vjp)


def scatter(x: Tensor, indices, axis: int, size: int) -> Tensor:
    """Place slices of ``x`` at ``indices`` along ``axis`` of a zero tensor."""
    idx = np.asarray(indices, dtype=np.intp)
    xv = as_compute(x)
    if xv.shape[axis] != idx.size:
        raise ShapeError(f"scatter: {idx.size} indices for axis extent "
                         f"{xv.shape[axis]}")
    shape = list(xv.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=xv.dtype)
    sl = [slice(None)] * xv.ndim
    sl[axis] = idx
    out[tuple(sl)] = xv

    def vjp(g):
        return (np.take(g, idx, axis=axis),)

    return make_output("scatter", out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses

def weighted_cross_entropy(logits: Tensor, targets, weights,
                           ignore: int = -1) -> Tensor:
    """Weighted-mean cross-entropy over non-ignored rows.

    logits: (M, K); targets: integer array (M,); weights: (K,) strictly
    positive.  Normalized by the sum of applied weights, so rescaling all
    class weights leaves the value unchanged.
    """
    t = np.asarray(targets).reshape(-1)
    lv = as_compute(logits)
    if lv.ndim != 2 or lv.shape[0] != t.size:
        raise ShapeError(f"weighted_cross_entropy: logits {logits.shape} vs "
                         f"{t.size} targets")
    k = lv.shape[1]
    wv = np.asarray(weights, dtype=lv.dtype)
    if wv.shape != (k,) or np.any(wv <= 0):
        raise ShapeError(f"weighted_cross_entropy: need {k} positive weights")
    valid = t != ignore
    if not valid.any():
        raise ValueError("weighted_cross_entropy: every target is ignored")
    tv = t[valid]
    if tv.min() < 0 or tv.max() >= k:
        raise ShapeError(f"weighted_cross_entropy: target outside 0..{k - 1}")
    z = lv - lv.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w_row = np.zeros(t.size, dtype=lv.dtype)
    w_row[valid] = wv[tv]
    wsum = w_row.sum()
    nll = np.zeros(t.size, dtype=lv.dtype)
    nll[valid] = -logp[valid, tv]
    out = np.asarray((w_row * nll).sum() / wsum)

    def vjp(g):
        p = np.exp(logp)
        d = p * w_row[:, None]
        d[valid, tv] -= w_row[valid]
        return (g * d / wsum,)

    return make_output("weighted_cross_entropy", out, (logits,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    x, y = as_compute(a), as_compute(b)
    if x.shape != y.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = x - y
    out = np.asarray((diff * diff).mean())
    n = diff.size

    def vjp(g):
        d = g * 2.0 * diff / n
        return (d, -d)

    return make_output("mse", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# generic dispatch

_REGISTRY = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "sqrt": sqrt,
    "bias_add": bias_add,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "layer_norm": layer_norm,
    "batch_norm": batch_norm,
    "softmax": softmax,
    "gelu": gelu,
    "relu": relu,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "adaptive_avg_pool2d": adaptive_avg_pool2d,
    "resize_bilinear": resize_bilinear,
    "dropout": dropout,
    "concat": concat,
    "reshape": reshape,
    "permute": permute,
    "gather": gather,
    "scatter": scatter,
    "weighted_cross_entropy": weighted_cross_entropy,
    "mse": mse,
}


def apply_primitive(kind: str, operands: Sequence[Tensor], attrs: Optional[dict] = None):
    """Dispatch a primitive by id; attrs carry stride/padding/eps/etc."""
    fn = _REGISTRY.get(kind)
    if fn is None:
        raise UnknownPrimitiveError(f"unknown primitive '{kind}'")
    if kind == "concat":
        return fn(list(operands), **(attrs or {}))
    return fn(*operands, **(attrs or {}))


def primitive_ids():
    return sorted(_REGISTRY)
