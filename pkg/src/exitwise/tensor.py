"""Minimal dense float32 kernels: matmul, layer norm, GELU, softmax, attention.

Everything here is a pure function of its inputs and returns float32.
Determinism note: summations go through BLAS/numpy reductions, which are
fixed for a given build and input, so repeated runs are bitwise identical.
"""

import numpy as np
from scipy.special import erf

from .errors import DimensionError

_SQRT2 = np.float32(np.sqrt(2.0))


def as_f32(x):
    """Coerce to a contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a, b):
    """Standard matrix product of two rank-2 float32 tensors."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 inputs, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply gamma/beta.

    gamma=None / beta=None means the parameter-free variant.
    """
    if eps <= 0:
        raise DimensionError(f"layer_norm eps must be > 0, got {eps}")
    x = as_f32(x)
    d = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    var = np.square(x - mean).mean(axis=-1, keepdims=True, dtype=np.float32)
    xhat = (x - mean) / np.sqrt(var + np.float32(eps))
    if gamma is not None:
        gamma = as_f32(gamma)
        if gamma.shape != (d,):
            raise DimensionError(f"gamma shape {gamma.shape} does not match last dim {d}")
        xhat = xhat * gamma
    if beta is not None:
        beta = as_f32(beta)
        if beta.shape != (d,):
            raise DimensionError(f"beta shape {beta.shape} does not match last dim {d}")
        xhat = xhat + beta
    return xhat.astype(np.float32, copy=False)


def gelu(x):
    """Exact GELU: x * Phi(x)."""
    x = as_f32(x)
    return (x * 0.5 * (1.0 + erf(x / _SQRT2))).astype(np.float32, copy=False)


def quick_gelu(x):
    """x * sigmoid(1.702 x), the activation used by CLIP encoder blocks."""
    x = as_f32(x)
    return (x / (1.0 + np.exp(np.float32(-1.702) * x))).astype(np.float32, copy=False)


def softmax(x):
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    x = as_f32(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True, dtype=np.float32)).astype(np.float32, copy=False)


def attention(q, k, v):
    """Single-head scaled dot-product attention: softmax(q k^T / sqrt(d)) v."""
    q = as_f32(q)
    k = as_f32(k)
    v = as_f32(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention expects rank-2 q, k, v")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q/k head dims disagree: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k/v token counts disagree: {k.shape} vs {v.shape}")
    scale = np.float32(1.0 / np.sqrt(q.shape[1]))
    scores = (q @ k.T) * scale
    return softmax(scores) @ v
