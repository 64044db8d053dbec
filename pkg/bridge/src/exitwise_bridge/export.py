"""Checkpoint and dataset conversion into engine archives.

``export_model`` maps a Hugging Face ``CLIPVisionModelWithProjection``
state dict onto the engine's model layout: per-block q/k/v projections
are concatenated into one qkv matrix, the pre/post layer norms and the
visual projection are carried over, and the activation is recorded as
quick-GELU. ``export_dataset`` stores pre-embedded token sequences (patch
embedding + position embedding, before the pre layer norm), labels, and a
prompt-ensemble text bank, so the engine never touches raw pixels.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .archive import write_archive

TEMPLATES = [
    "a photo of a {}",
    "a clear photo of a {}",
    "a close-up photo of a {}",
    "a photo of one {}",
    "a cropped photo of a {}",
]

ACTIVATION_CODES = {"gelu": 0, "quick_gelu": 1}


class ExportError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    model_name: str
    num_layers: int
    tensor_map: Dict[str, str]        # source checkpoint key -> archive entry
    templates: List[str] = field(default_factory=lambda: list(TEMPLATES))
    subset_size: int = 0

    def to_json_dict(self):
        return {
            "model_name": self.model_name,
            "num_layers": self.num_layers,
            "tensor_map": self.tensor_map,
            "templates": self.templates,
            "subset_size": self.subset_size,
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)


def _f32(t):
    return t.detach().cpu().numpy().astype(np.float32)


def _take(sd, key):
    if key not in sd:
        raise ExportError(f"checkpoint is missing tensor {key!r}")
    return sd[key]


def export_model(model, path, model_name="clip-vit", logit_scale=100.0):
    """Write the vision tower of a CLIPVisionModelWithProjection.

    Returns the ExportManifest. The archive carries f32 weights only; the
    engine quantizes on load. ``logit_scale`` is the exponentiated CLIP
    temperature (100.0 for the released checkpoints).
    """
    cfg = model.config
    sd = model.state_dict()
    num_layers = cfg.num_hidden_layers
    d = cfg.hidden_size
    num_patches = (cfg.image_size // cfg.patch_size) ** 2
    e = cfg.projection_dim

    tensors = {}
    tmap = {}

    def put(entry, key, value):
        tensors[entry] = value
        tmap[key] = entry

    dims = np.array([
        num_layers, d, num_patches, cfg.num_attention_heads,
        cfg.intermediate_size, e, ACTIVATION_CODES["quick_gelu"], 0,
    ], dtype=np.int32)
    tensors["config/dims"] = dims
    tensors["config/logit_scale"] = np.array([logit_scale], dtype=np.float32)

    pre = "vision_model.pre_layrnorm"
    put("ln_pre/g", f"{pre}.weight", _f32(_take(sd, f"{pre}.weight")))
    put("ln_pre/b", f"{pre}.bias", _f32(_take(sd, f"{pre}.bias")))

    for i in range(num_layers):
        src = f"vision_model.encoder.layers.{i}"
        dst = f"block{i}"
        qkv_w = np.concatenate([
            _f32(_take(sd, f"{src}.self_attn.{p}_proj.weight"))
            for p in ("q", "k", "v")], axis=0)
        qkv_b = np.concatenate([
            _f32(_take(sd, f"{src}.self_attn.{p}_proj.bias"))
            for p in ("q", "k", "v")], axis=0)
        put(f"{dst}/qkv_w", f"{src}.self_attn.[qkv]_proj.weight", qkv_w)
        put(f"{dst}/qkv_b", f"{src}.self_attn.[qkv]_proj.bias", qkv_b)
        put(f"{dst}/out_w", f"{src}.self_attn.out_proj.weight",
            _f32(_take(sd, f"{src}.self_attn.out_proj.weight")))
        put(f"{dst}/out_b", f"{src}.self_attn.out_proj.bias",
            _f32(_take(sd, f"{src}.self_attn.out_proj.bias")))
        put(f"{dst}/fc1_w", f"{src}.mlp.fc1.weight",
            _f32(_take(sd, f"{src}.mlp.fc1.weight")))
        put(f"{dst}/fc1_b", f"{src}.mlp.fc1.bias",
            _f32(_take(sd, f"{src}.mlp.fc1.bias")))
        put(f"{dst}/fc2_w", f"{src}.mlp.fc2.weight",
            _f32(_take(sd, f"{src}.mlp.fc2.weight")))
        put(f"{dst}/fc2_b", f"{src}.mlp.fc2.bias",
            _f32(_take(sd, f"{src}.mlp.fc2.bias")))
        put(f"{dst}/ln1_g", f"{src}.layer_norm1.weight",
            _f32(_take(sd, f"{src}.layer_norm1.weight")))
        put(f"{dst}/ln1_b", f"{src}.layer_norm1.bias",
            _f32(_take(sd, f"{src}.layer_norm1.bias")))
        put(f"{dst}/ln2_g", f"{src}.layer_norm2.weight",
            _f32(_take(sd, f"{src}.layer_norm2.weight")))
        put(f"{dst}/ln2_b", f"{src}.layer_norm2.bias",
            _f32(_take(sd, f"{src}.layer_norm2.bias")))

    post = "vision_model.post_layernorm"
    put("ln_post/g", f"{post}.weight", _f32(_take(sd, f"{post}.weight")))
    put("ln_post/b", f"{post}.bias", _f32(_take(sd, f"{post}.bias")))
    proj_w = _f32(_take(sd, "visual_projection.weight"))
    put("proj/w", "visual_projection.weight", proj_w)
    tensors["proj/b"] = np.zeros(e, dtype=np.float32)  # CLIP projection has no bias

    write_archive(path, tensors)
    return ExportManifest(model_name=model_name, num_layers=num_layers,
                          tensor_map=tmap)


def build_text_bank(template_embeddings):
    """Average template embeddings per class and unit-normalize the rows.

    ``template_embeddings`` is [T, K, e]: one embedding per (template,
    class) pair, in any scale.
    """
    emb = np.asarray(template_embeddings, dtype=np.float32)
    if emb.ndim != 3:
        raise ExportError(f"expected [T, K, e] template embeddings, got {emb.shape}")
    bank = emb.mean(axis=0)
    norms = np.linalg.norm(bank, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ExportError("a class embedding averaged to the zero vector")
    return bank / norms


def embed_images(model, pixel_values):
    """Pre-embedded token sequences [S, N+1, d]: patch + position embedding.

    The pre layer norm is NOT applied here; the engine applies it from the
    exported ln_pre weights.
    """
    import torch

    with torch.no_grad():
        tokens = model.vision_model.embeddings(pixel_values)
    return tokens.cpu().numpy().astype(np.float32)


def export_dataset(model, pixel_values, labels, text_bank, path,
                   logit_scale=100.0):
    """Write token sequences, labels, and the text bank as one archive."""
    tokens = embed_images(model, pixel_values)
    labels = np.asarray(labels, dtype=np.int64)
    bank = np.asarray(text_bank, dtype=np.float32)
    if labels.shape[0] != tokens.shape[0]:
        raise ExportError(
            f"{tokens.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= bank.shape[0]):
        raise ExportError(
            f"labels must lie in [0, {bank.shape[0]}), got "
            f"[{labels.min()}, {labels.max()}]")
    norms = np.linalg.norm(bank, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ExportError("text bank rows must be unit-norm within 1e-4")
    write_archive(path, {
        "tokens": tokens,
        "labels": labels,
        "text_bank": bank,
        "text_bank/logit_scale": np.array([logit_scale], dtype=np.float32),
    })
    return tokens.shape
