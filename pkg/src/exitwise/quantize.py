"""Simulated dynamic INT8 weight quantization for linear layers.

Symmetric quantization with zero-point 0 and codes in [-127, 127].
Only weights are quantized; the forward pass dequantizes and runs in
float32, so error enters the activation stream purely through weight
rounding. Granularities: per-channel (one scale per output row),
per-tensor (one shared scale), and a lossless pass-through used as the
zero-noise control.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, InputError
from .tensor import as_f32

QMAX = 127

GRANULARITIES = ("per_channel", "per_tensor", "lossless")


@dataclass(frozen=True)
class QuantizedLinear:
    """Symmetric INT8 weights, per-output-channel scales, float bias.

    When ``exact`` is set the layer is a lossless pass-through: dequantize
    returns the stored float32 weights bitwise (the zero-noise regime).
    """

    q_weights: np.ndarray  # int8 [out, in]
    scales: np.ndarray     # float32 [out], all > 0
    bias: np.ndarray       # float32 [out]
    granularity: str = "per_channel"
    exact: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def out_features(self):
        return self.q_weights.shape[0]

    @property
    def in_features(self):
        return self.q_weights.shape[1]


def quantize_linear(w, bias=None, granularity="per_channel"):
    """Quantize a [out, in] weight matrix; scale_c = max|w_c| / 127.

    All-zero channels get scale 1 and zero codes. Rounding is
    round-half-to-even. ``lossless`` keeps an exact float copy so that
    forward passes reproduce FP32 bitwise.
    """
    w = as_f32(w)
    if w.ndim != 2 or 0 in w.shape:
        raise InputError(f"weights must be a non-degenerate matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("weights contain NaN/Inf")
    if granularity not in GRANULARITIES:
        raise InputError(f"unknown granularity {granularity!r}")
    out = w.shape[0]
    if bias is None:
        bias = np.zeros(out, dtype=np.float32)
    bias = as_f32(bias)
    if bias.shape != (out,):
        raise DimensionError(f"bias shape {bias.shape} does not match out={out}")

    if granularity == "per_tensor":
        maxabs = np.full(out, np.abs(w).max(), dtype=np.float32)
    else:
        maxabs = np.abs(w).max(axis=1).astype(np.float32)
    scales = np.where(maxabs > 0, maxabs / QMAX, np.float32(1.0)).astype(np.float32)
    codes = np.clip(np.round(w / scales[:, None]), -QMAX, QMAX).astype(np.int8)
    exact = w.copy() if granularity == "lossless" else None
    return QuantizedLinear(codes, scales, bias, granularity, exact)


def dequantize(ql):
    """Reconstruct float32 weights from codes and scales."""
    if ql.exact is not None:
        return ql.exact
    return (ql.q_weights.astype(np.float32) * ql.scales[:, None]).astype(np.float32)


def quantized_forward(x, ql):
    """x @ dequantize(ql)^T + bias, computed in float32."""
    x = as_f32(x)
    if x.ndim != 2 or x.shape[1] != ql.in_features:
        raise DimensionError(
            f"input shape {x.shape} incompatible with quantized linear "
            f"[{ql.out_features}x{ql.in_features}]"
        )
    return x @ dequantize(ql).T + ql.bias


def quant_mse(w, ql):
    """Mean squared element error between w and its dequantized twin."""
    w = as_f32(w)
    deq = dequantize(ql)
    if w.shape != deq.shape:
        raise DimensionError(f"shape mismatch: {w.shape} vs {deq.shape}")
    return float(np.mean(np.square(w.astype(np.float64) - deq.astype(np.float64))))
