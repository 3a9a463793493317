"""Desk-scale geospatial foundation-model deployment pipeline.

Compact ViT pretraining by dual-MAE distillation, task-head fine-tuning,
spectral-index auto-labelling, FP16 quantization with parity checks, and
resource profiling, all on a small numpy tensor engine.
"""

from .tensor import (FP16, FP32, FP64, NonFiniteError, ShapeError, Tape,
                     Tensor, TensorError, UnknownPrimitiveError, backward,
                     cast, grad_check, parameter, recording)

__version__ = "0.1.0"

__all__ = [
    "FP16", "FP32", "FP64", "NonFiniteError", "ShapeError", "Tape",
    "Tensor", "TensorError", "UnknownPrimitiveError", "backward", "cast",
    "grad_check", "parameter", "recording", "__version__",
]
