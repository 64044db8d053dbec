"""Pre-norm ViT-style encoder running FP32 and INT8 paths in lockstep.

Blocks are the usual pre-norm layout (LN -> MHA -> residual, LN -> MLP ->
residual). Each linear projection carries its FP32 weights plus an INT8
twin; ``mode`` selects which is used. Inputs are pre-embedded token
sequences with [CLS] at index 0; patchification happens upstream.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .quantize import QuantizedLinear, quantize_linear, quantized_forward


@dataclass
class ViTConfig:
    num_layers: int = 12
    dim: int = 768
    num_patches: int = 196
    num_heads: int = 12
    mlp_ratio: float = 4.0
    embed_dim: int = 512
    activation: str = "gelu"  # "gelu" | "quick_gelu"
    ln_eps: float = 1e-5
    # capture the final trace entry after the terminal layer norm instead
    # of post-block (off by default; post-block is the reference point)
    capture_final_ln: bool = False

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2")
        if self.num_patches < 1:
            raise ConfigError("num_patches must be >= 1")
        if self.dim % self.num_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.activation not in ("gelu", "quick_gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def seq_len(self):
        return self.num_patches + 1

    @property
    def mlp_dim(self):
        return int(round(self.dim * self.mlp_ratio))

    @property
    def head_dim(self):
        return self.dim // self.num_heads


@dataclass
class LinearWeights:
    """One FP32 projection plus its INT8 twin (filled by quantize_model)."""

    w: np.ndarray  # [out, in]
    b: np.ndarray  # [out]
    q: Optional[QuantizedLinear] = field(default=None, repr=False)


@dataclass
class BlockWeights:
    qkv: LinearWeights   # [3d, d]
    out: LinearWeights   # [d, d]
    fc1: LinearWeights   # [mlp, d]
    fc2: LinearWeights   # [d, mlp]
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    def linears(self):
        return {"qkv": self.qkv, "out": self.out, "fc1": self.fc1, "fc2": self.fc2}


@dataclass
class ModelWeights:
    config: ViTConfig
    blocks: List[BlockWeights]
    ln_post_g: np.ndarray
    ln_post_b: np.ndarray
    proj: LinearWeights  # [e, d]
    logit_scale: float = 100.0
    ln_pre_g: Optional[np.ndarray] = None
    ln_pre_b: Optional[np.ndarray] = None
    quantization: Optional[str] = None  # granularity used for the twins

    def __post_init__(self):
        if len(self.blocks) != self.config.num_layers:
            raise ConfigError(
                f"model has {len(self.blocks)} blocks, config says {self.config.num_layers}"
            )


@dataclass
class DualTrace:
    """Per-layer activations of the FP32 and INT8 paths of one sample.

    Index 0 is the input embedding (identical across paths); index L is the
    output of block L.
    """

    z_fp32: List[np.ndarray]
    z_int8: List[np.ndarray]

    @property
    def num_layers(self):
        return len(self.z_fp32) - 1


def _linear(x, lw, mode):
    if mode == "fp32":
        return x @ lw.w.T + lw.b
    if lw.q is None:
        raise ConfigError("int8 mode requested but no quantized twin present; run quantize_model")
    return quantized_forward(x, lw.q)


def _activation(cfg):
    return T.gelu if cfg.activation == "gelu" else T.quick_gelu


def forward_block(z, bw, cfg, mode="fp32"):
    """One pre-norm transformer block; mode selects FP32 or INT8 projections."""
    if z.ndim != 2 or z.shape != (cfg.seq_len, cfg.dim):
        raise DimensionError(f"block input must be {(cfg.seq_len, cfg.dim)}, got {z.shape}")
    if mode not in ("fp32", "int8"):
        raise ConfigError(f"unknown mode {mode!r}")
    n, d = z.shape
    h = cfg.num_heads
    dh = cfg.head_dim

    x = T.layer_norm(z, bw.ln1_g, bw.ln1_b, cfg.ln_eps)
    qkv = _linear(x, bw.qkv, mode)  # [n, 3d]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    attn = np.empty((n, d), dtype=np.float32)
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        attn[:, sl] = T.attention(q[:, sl], k[:, sl], v[:, sl])
    z = z + _linear(attn, bw.out, mode)

    y = T.layer_norm(z, bw.ln2_g, bw.ln2_b, cfg.ln_eps)
    m = _linear(_activation(cfg)(_linear(y, bw.fc1, mode)), bw.fc2, mode)
    return (z + m).astype(np.float32, copy=False)


def input_stream(tokens, model):
    """The stream entering block 1 (pre-LN applied if the model has one)."""
    tokens = T.as_f32(tokens)
    cfg = model.config
    if tokens.shape != (cfg.seq_len, cfg.dim):
        raise DimensionError(f"tokens must be {(cfg.seq_len, cfg.dim)}, got {tokens.shape}")
    if model.ln_pre_g is not None:
        tokens = T.layer_norm(tokens, model.ln_pre_g, model.ln_pre_b, cfg.ln_eps)
    return tokens


def run_blocks(tokens, model, mode="fp32", upto=None):
    """Run blocks 1..upto and return the final stream plus the executed count."""
    cfg = model.config
    upto = cfg.num_layers if upto is None else upto
    z = input_stream(tokens, model)
    executed = 0
    for bw in model.blocks[:upto]:
        z = forward_block(z, bw, cfg, mode)
        executed += 1
    return z, executed


def run_dual_path(tokens, model):
    """Run FP32 and INT8 paths from the same input, capturing every z_L."""
    cfg = model.config
    z_f = input_stream(tokens, model)
    z_q = z_f.copy()
    trace_f, trace_q = [z_f], [z_q]
    for i, bw in enumerate(model.blocks):
        z_f = forward_block(z_f, bw, cfg, "fp32")
        z_q = forward_block(z_q, bw, cfg, "int8")
        last = i == cfg.num_layers - 1
        if last and cfg.capture_final_ln:
            trace_f.append(T.layer_norm(z_f, model.ln_post_g, model.ln_post_b, cfg.ln_eps))
            trace_q.append(T.layer_norm(z_q, model.ln_post_g, model.ln_post_b, cfg.ln_eps))
        else:
            trace_f.append(z_f)
            trace_q.append(z_q)
    return DualTrace(trace_f, trace_q)


def terminal_embedding(z, model, mode="fp32"):
    """Backbone [CLS] embedding: ln_post on token 0, then the projection."""
    cfg = model.config
    cls = T.layer_norm(z[0:1], model.ln_post_g, model.ln_post_b, cfg.ln_eps)
    return _linear(cls, model.proj, mode)[0]


def quantize_model(model, granularity="per_channel"):
    """Attach INT8 twins to every linear projection (blocks + terminal proj)."""
    for bw in model.blocks:
        for lw in bw.linears().values():
            lw.q = quantize_linear(lw.w, lw.b, granularity)
    model.proj.q = quantize_linear(model.proj.w, model.proj.b, granularity)
    model.quantization = granularity
    return model
