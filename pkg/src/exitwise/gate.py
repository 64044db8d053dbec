"""Exit gate: feature extraction, scoring, BCE training, heuristic baseline.

Three scalar features per (sample, layer): confidence (top-1 prob), top-2
margin, and spatial-activation variance (SAV) of the patch tokens. The
learned gate is a per-layer logistic regression over standardized
features; the baseline is a bare confidence threshold.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import DegenerateTrainingWarning, InputError
from .tensor import as_f32

PARAM_BOUND = 50.0  # |w|, |b| clip; bounds degenerate single-class training


@dataclass(frozen=True)
class GateFeatures:
    confidence: float  # top-1 probability
    margin: float      # top-1 minus top-2
    sav: float         # mean squared deviation of patch tokens from their mean

    def as_array(self):
        return np.array([self.confidence, self.margin, self.sav], dtype=np.float64)


@dataclass
class LayerGate:
    w: np.ndarray                    # (w1, w2, w3)
    b: float
    feat_mean: np.ndarray            # standardization stats from the gating split
    feat_std: np.ndarray


@dataclass
class GateParams:
    layers: Dict[int, LayerGate] = field(default_factory=dict)
    seed: Optional[int] = None

    def to_json_dict(self):
        return {
            "seed": self.seed,
            "layers": {
                str(L): {
                    "w1": float(g.w[0]), "w2": float(g.w[1]), "w3": float(g.w[2]),
                    "b": float(g.b),
                    "feat_mean": [float(v) for v in g.feat_mean],
                    "feat_std": [float(v) for v in g.feat_std],
                }
                for L, g in self.layers.items()
            },
        }

    @classmethod
    def from_json_dict(cls, d):
        gp = cls(seed=d.get("seed"))
        for L, g in d["layers"].items():
            gp.layers[int(L)] = LayerGate(
                w=np.array([g["w1"], g["w2"], g["w3"]], dtype=np.float64),
                b=float(g["b"]),
                feat_mean=np.asarray(g["feat_mean"], dtype=np.float64),
                feat_std=np.asarray(g["feat_std"], dtype=np.float64),
            )
        return gp


def extract_features(probs, z):
    """Gate features from a class distribution and the layer activations."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise InputError(f"need K >= 2 class probabilities for the margin, got shape {p.shape}")
    top2 = np.sort(p)[-2:]
    z = as_f32(z)
    patches = z[1:].astype(np.float64)
    centroid = patches.mean(axis=0)
    sav = float(np.mean(np.sum((patches - centroid) ** 2, axis=1)))
    return GateFeatures(
        confidence=float(top2[1]),
        margin=float(top2[1] - top2[0]),
        sav=sav,
    )


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _standardize(feats, gate):
    return (feats - gate.feat_mean) / gate.feat_std


def gate_score(features, params, layer):
    """Logistic score of the affine feature combination, strictly in (0, 1)."""
    if layer not in params.layers:
        raise InputError(f"no gate parameters for layer {layer}")
    g = params.layers[layer]
    x = _standardize(features.as_array(), g)
    return float(np.clip(_sigmoid(g.w @ x + g.b), 1e-15, 1.0 - 1e-15))


def heuristic_gate(features, tau):
    """Confidence-only baseline: exit iff c > tau (ties hold)."""
    return features.confidence > tau


def bce_loss_and_grads(w, b, x, y):
    """Binary cross-entropy of the logistic gate, with analytic gradients."""
    logits = x @ w + b
    p = _sigmoid(logits)
    eps = 1e-12
    loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    d = (p - y) / x.shape[0]
    return loss, d @ x, d.sum()


def train_layer_gate(features, labels, lr=1e-2, epochs=2000):
    """Full-batch gradient descent on BCE for one layer; standardizes features."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] != y.shape[0]:
        raise InputError(f"expected [S, 3] features and matching labels, got {x.shape}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    xs = (x - mean) / std

    classes = np.unique(y)
    if classes.size < 2:
        warnings.warn(
            "gate training saw a single class; pinning gate to the prior",
            DegenerateTrainingWarning,
        )
        b = PARAM_BOUND if classes[0] == 1 else -PARAM_BOUND
        return LayerGate(np.zeros(3), float(b), mean, std)

    w = np.zeros(3)
    b = 0.0
    for _ in range(epochs):
        _, gw, gb = bce_loss_and_grads(w, b, xs, y)
        w = np.clip(w - lr * gw, -PARAM_BOUND, PARAM_BOUND)
        b = float(np.clip(b - lr * gb, -PARAM_BOUND, PARAM_BOUND))
    return LayerGate(w, b, mean, std)


def train_gate(per_layer_features, per_layer_labels, lr=1e-2, epochs=2000, seed=None):
    """Independent logistic regression per layer (label = exit-is-correct)."""
    params = GateParams(seed=seed)
    for layer in sorted(per_layer_features):
        params.layers[layer] = train_layer_gate(
            per_layer_features[layer], per_layer_labels[layer], lr=lr, epochs=epochs)
    return params
