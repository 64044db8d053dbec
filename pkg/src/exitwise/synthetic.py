"""Seedable synthetic model / dataset generation and archive (de)serialization.

Models are random pre-norm ViT stacks with weights scaled so activations
stay O(1). Quantization-noise schedules are realized by outlier injection:
multiplying the max-abs weight of each output channel of a block's
projections inflates that channel's INT8 scale and therefore its rounding
error, without retraining anything.

Schedules: ``zero`` (no injection; meant to be run lossless), ``none``
(plain weights, natural INT8 noise), ``flat`` (constant multiplier),
``superlinear`` (multiplier growing with depth cubed), ``spike`` (one
anomalous layer).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .archive import read_archive, write_archive
from .encoder import BlockWeights, LinearWeights, ModelWeights, ViTConfig
from .errors import ConfigError
from .heads import ExitHead, TextBank

_ACTIVATIONS = ["gelu", "quick_gelu"]

SCHEDULE_KINDS = ("zero", "none", "flat", "superlinear", "spike")


@dataclass
class NoiseSchedule:
    kind: str = "none"
    strength: float = 8.0
    spike_layer: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown noise schedule {self.kind!r}")
        if self.kind == "spike" and self.spike_layer is None:
            raise ConfigError("spike schedule needs spike_layer")

    def multiplier(self, layer, num_layers):
        if self.kind in ("zero", "none"):
            return 1.0
        if self.kind == "flat":
            return self.strength
        if self.kind == "superlinear":
            return 1.0 + self.strength * (layer / num_layers) ** 3
        return self.strength if layer == self.spike_layer else 1.0


def _inject_outliers(w, mult, rng):
    """Scale the max-abs element of every output row by ``mult``."""
    if mult <= 1.0:
        return w
    idx = np.abs(w).argmax(axis=1)
    w[np.arange(w.shape[0]), idx] *= np.float32(mult)
    return w


def _rand_linear(rng, out_f, in_f, scale=0.4):
    w = rng.normal(0.0, scale / np.sqrt(in_f), size=(out_f, in_f)).astype(np.float32)
    b = np.zeros(out_f, dtype=np.float32)
    return LinearWeights(w, b)


def make_model(cfg, schedule=None, seed=0, logit_scale=100.0):
    """Random encoder weights with the schedule's outliers injected."""
    schedule = schedule or NoiseSchedule()
    rng = np.random.default_rng(seed)
    d, mlp = cfg.dim, cfg.mlp_dim
    blocks = []
    for L in range(1, cfg.num_layers + 1):
        mult = schedule.multiplier(L, cfg.num_layers)
        bw = BlockWeights(
            qkv=_rand_linear(rng, 3 * d, d),
            out=_rand_linear(rng, d, d),
            fc1=_rand_linear(rng, mlp, d),
            fc2=_rand_linear(rng, d, mlp),
            ln1_g=np.ones(d, dtype=np.float32),
            ln1_b=np.zeros(d, dtype=np.float32),
            ln2_g=np.ones(d, dtype=np.float32),
            ln2_b=np.zeros(d, dtype=np.float32),
        )
        for lw in bw.linears().values():
            _inject_outliers(lw.w, mult, rng)
        blocks.append(bw)
    return ModelWeights(
        config=cfg,
        blocks=blocks,
        ln_post_g=np.ones(d, dtype=np.float32),
        ln_post_b=np.zeros(d, dtype=np.float32),
        proj=_rand_linear(rng, cfg.embed_dim, d, scale=1.0),
        logit_scale=logit_scale,
    )


def make_dataset(cfg, num_classes, num_samples, seed=0, token_noise=0.5,
                 cls_scale=0.2, logit_scale=100.0):
    """Noisy-centroid token sequences plus labels and a random text bank.

    Patch tokens are class centroid + i.i.d. noise; the [CLS] slot is
    uninformative small noise (the immature-singleton regime).
    """
    rng = np.random.default_rng(seed)
    d, n, s = cfg.dim, cfg.num_patches, cfg.seq_len
    centroids = rng.normal(0.0, 1.0, size=(num_classes, d)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=num_samples).astype(np.int64)
    tokens = np.empty((num_samples, s, d), dtype=np.float32)
    for i, y in enumerate(labels):
        tokens[i, 0] = cls_scale * rng.normal(0.0, 1.0, size=d)
        tokens[i, 1:] = centroids[y] + token_noise * rng.normal(0.0, 1.0, size=(n, d))
    bank = rng.normal(0.0, 1.0, size=(num_classes, cfg.embed_dim)).astype(np.float32)
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    return tokens, labels, TextBank(bank, logit_scale)


# --- archive layout -------------------------------------------------------

def _config_entries(cfg, logit_scale):
    dims = np.array([
        cfg.num_layers, cfg.dim, cfg.num_patches, cfg.num_heads,
        cfg.mlp_dim, cfg.embed_dim, _ACTIVATIONS.index(cfg.activation),
        1 if cfg.capture_final_ln else 0,
    ], dtype=np.int32)
    return {
        "config/dims": dims,
        "config/logit_scale": np.array([logit_scale], dtype=np.float32),
    }


def _config_from_entries(t):
    L, d, n, heads, mlp, e, act, cap = (int(v) for v in t["config/dims"])
    cfg = ViTConfig(
        num_layers=L, dim=d, num_patches=n, num_heads=heads,
        mlp_ratio=mlp / d, embed_dim=e, activation=_ACTIVATIONS[act],
        capture_final_ln=bool(cap),
    )
    return cfg, float(t["config/logit_scale"][0])


def save_model(path, model):
    tensors = _config_entries(model.config, model.logit_scale)
    if model.ln_pre_g is not None:
        tensors["ln_pre/g"] = model.ln_pre_g
        tensors["ln_pre/b"] = model.ln_pre_b
    for i, bw in enumerate(model.blocks):
        p = f"block{i}"
        for name, lw in bw.linears().items():
            tensors[f"{p}/{name}_w"] = lw.w
            tensors[f"{p}/{name}_b"] = lw.b
        tensors[f"{p}/ln1_g"] = bw.ln1_g
        tensors[f"{p}/ln1_b"] = bw.ln1_b
        tensors[f"{p}/ln2_g"] = bw.ln2_g
        tensors[f"{p}/ln2_b"] = bw.ln2_b
    tensors["ln_post/g"] = model.ln_post_g
    tensors["ln_post/b"] = model.ln_post_b
    tensors["proj/w"] = model.proj.w
    tensors["proj/b"] = model.proj.b
    write_archive(path, tensors)


def load_model(path):
    t = read_archive(path)
    cfg, logit_scale = _config_from_entries(t)
    blocks = []
    for i in range(cfg.num_layers):
        p = f"block{i}"
        blocks.append(BlockWeights(
            qkv=LinearWeights(t[f"{p}/qkv_w"], t[f"{p}/qkv_b"]),
            out=LinearWeights(t[f"{p}/out_w"], t[f"{p}/out_b"]),
            fc1=LinearWeights(t[f"{p}/fc1_w"], t[f"{p}/fc1_b"]),
            fc2=LinearWeights(t[f"{p}/fc2_w"], t[f"{p}/fc2_b"]),
            ln1_g=t[f"{p}/ln1_g"], ln1_b=t[f"{p}/ln1_b"],
            ln2_g=t[f"{p}/ln2_g"], ln2_b=t[f"{p}/ln2_b"],
        ))
    return ModelWeights(
        config=cfg,
        blocks=blocks,
        ln_post_g=t["ln_post/g"],
        ln_post_b=t["ln_post/b"],
        proj=LinearWeights(t["proj/w"], t["proj/b"]),
        logit_scale=logit_scale,
        ln_pre_g=t.get("ln_pre/g"),
        ln_pre_b=t.get("ln_pre/b"),
    )


def save_dataset(path, tokens, labels, bank):
    write_archive(path, {
        "tokens": tokens.astype(np.float32),
        "labels": np.asarray(labels, dtype=np.int64),
        "text_bank": bank.embeddings,
        "text_bank/logit_scale": np.array([bank.logit_scale], dtype=np.float32),
    })


def load_dataset(path):
    t = read_archive(path)
    bank = TextBank(t["text_bank"], float(t["text_bank/logit_scale"][0]))
    return t["tokens"], t["labels"], bank


def save_heads(path, heads):
    """Persist exit heads; manifest names carry the layer index."""
    tensors = {}
    meta = []
    for L in sorted(heads):
        h = heads[L]
        p = f"head{L}"
        tensors[f"{p}/w1"] = h.w1
        tensors[f"{p}/b1"] = h.b1
        tensors[f"{p}/w2"] = h.w2
        tensors[f"{p}/b2"] = h.b2
        meta.append((L, h.supervision, -1 if h.seed is None else h.seed))
    tensors["heads/index"] = np.array([m[0] for m in meta], dtype=np.int32)
    tensors["heads/supervision"] = np.array(
        [0 if m[1] == "hard" else 1 for m in meta], dtype=np.int32)
    tensors["heads/seed"] = np.array([m[2] for m in meta], dtype=np.int64)
    write_archive(path, tensors)


def load_heads(path):
    t = read_archive(path)
    heads = {}
    layers = t["heads/index"]
    sup = t["heads/supervision"]
    seeds = t["heads/seed"]
    for i, L in enumerate(int(v) for v in layers):
        p = f"head{L}"
        heads[L] = ExitHead(
            layer=L,
            w1=t[f"{p}/w1"], b1=t[f"{p}/b1"],
            w2=t[f"{p}/w2"], b2=t[f"{p}/b2"],
            supervision="hard" if sup[i] == 0 else "distill",
            seed=None if seeds[i] < 0 else int(seeds[i]),
        )
    return heads
