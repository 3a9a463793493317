"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy buffers in one of three precisions (FP64,
FP32, FP16-stored).  Gradients are recorded on an explicit tape: nothing
is tracked unless a ``Tape`` is active, so pure inference allocates no
gradient state.  FP16 tensors only *store* half precision values; all
arithmetic upcasts them to FP32 before accumulating.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FP64 = "fp64"
FP32 = "fp32"
FP16 = "fp16"

_NP_DTYPE = {FP64: np.float64, FP32: np.float32, FP16: np.float16}
_FROM_NP = {np.dtype(v): k for k, v in _NP_DTYPE.items()}

FP16_MAX = 65504.0


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError):
    """Operand shapes do not conform to a primitive's shape rule."""


class UnknownPrimitiveError(TensorError):
    """apply_primitive was handed an unregistered primitive id."""


class NonFiniteError(TensorError):
    """A checked computation produced NaN or infinity."""


class Tensor:
    """Immutable dense array; precision tracked explicitly."""

    __slots__ = ("data", "dtype", "requires_grad", "tracked")

    def __init__(self, data, dtype: Optional[str] = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is None:
            dtype = _FROM_NP.get(arr.dtype, FP32)
        arr = arr.astype(_NP_DTYPE[dtype], copy=False)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        elif arr.flags.writeable and arr is data:
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.dtype = dtype
        self.requires_grad = requires_grad
        self.tracked = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def parameter(data, dtype: str = FP32) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable  # grad_out (np.ndarray) -> tuple of np.ndarray or None per input


@dataclass
class Tape:
    """Topologically ordered record of recorded primitive applications."""

    nodes: list = field(default_factory=list)


_TAPE_STACK: list = []
_CHECK_FINITE = False


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def recording(tape: Tape):
    """Record primitive applications onto ``tape`` within the block."""
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


def compute_dtype(*tensors: Tensor) -> str:
    """FP64 if any operand is FP64, else FP32 (FP16 never accumulates)."""
    for t in tensors:
        if t.dtype == FP64:
            return FP64
    return FP32


def as_compute(t: Tensor) -> np.ndarray:
    """Operand buffer upcast to its compute precision."""
    if t.dtype == FP16:
        return t.data.astype(np.float32)
    return t.data


def make_output(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
                vjp: Optional[Callable]) -> Tensor:
    """Wrap a primitive result, appending a tape node when recording."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite output from primitive '{op}'")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and vjp is not None and any(x.tracked for x in inputs):
        out.tracked = True
        tape.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None):
    """Reverse-traverse ``tape`` from ``loss``.

    Returns a dict mapping each tensor in ``params`` (default: every
    requires_grad leaf reachable on the tape) to its gradient Tensor.
    Parameters not reachable from the loss map to zero gradients.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data, dtype=np.float64
                                          if loss.dtype == FP64 else np.float32)}
    leaves: dict = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp.requires_grad:
                leaves[key] = inp
    if params is None:
        params = list(leaves.values())
    out = {}
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros(p.shape)
        out[p] = Tensor(g, dtype=FP64 if p.dtype == FP64 else FP32)
    return out


def cast(t: Tensor, target: str) -> Tensor:
    """Precision cast.

    FP16 casts round to nearest-even and saturate to +/-65504 instead of
    overflowing to infinity; casting an FP16-representable value back up
    is exact.  Casts are not recorded on the tape.
    """
    if target not in _NP_DTYPE:
        raise TensorError(f"unknown dtype '{target}'")
    if target == t.dtype:
        return t
    if target == FP16:
        with np.errstate(over="ignore"):
            y = t.data.astype(np.float16)
        if np.any(np.isinf(y)):
            y = np.where(np.isinf(y), np.sign(y) * np.float16(FP16_MAX), y)
        return Tensor(y, dtype=FP16)
    return Tensor(t.data.astype(_NP_DTYPE[target]), dtype=target)


def grad_check(fn: Callable, inputs: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-12) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must build a scalar from the given FP64 inputs.  Error per
    entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    ``floor`` sets the gradient magnitude below which the comparison is
    treated as absolute; entries whose true derivative is orders of
    magnitude under the tensor's typical gradient sit inside the
    finite-difference round-off band, where a per-entry relative error is
    pure noise.
    """
    global _CHECK_FINITE
    for t in inputs:
        if t.dtype != FP64:
            raise TensorError("grad_check requires FP64 inputs")
    inputs = [Tensor(t.data, dtype=FP64, requires_grad=True) for t in inputs]
    tape = Tape()
    _CHECK_FINITE = True
    try:
        with recording(tape):
            out = fn(*inputs)
        if out.size != 1:
            raise TensorError("grad_check function must return a scalar")
        grads = backward(tape, out, params=inputs)
    finally:
        _CHECK_FINITE = False

    def eval_at(mod_idx, idx, value) -> float:
        probe = []
        for j, t in enumerate(inputs):
            if j == mod_idx:
                buf = t.data.copy()
                buf[idx] = value
                probe.append(Tensor(buf, dtype=FP64, requires_grad=False))
            else:
                probe.append(t)
        return fn(*probe).item()

    worst = 0.0
    for i, t in enumerate(inputs):
        analytic = grads[t].data
        for idx in np.ndindex(t.shape):
            x = t.data[idx]
            h = eps * max(1.0, abs(x))
            num = (eval_at(i, idx, x + h) - eval_at(i, idx, x - h)) / (2 * h)
            a = analytic[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
