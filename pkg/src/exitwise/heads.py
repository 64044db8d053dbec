"""Exit features, per-layer exit heads, and head training.

The exit feature is either the layer-normed mean over patch tokens
(spatio-semantic aggregate, SSA) or the [CLS] token. Each exit head is a
two-layer MLP (d -> d -> e, GELU) projecting the feature into the shared
image-text space; classification is cosine similarity against a bank of
unit-norm class embeddings, scaled and softmaxed.

Training supports hard-label cross-entropy and a distilled objective that
mixes in a cosine-embedding loss against teacher embeddings. Gradients are
analytic (verified against finite differences in the tests) and the
optimizer is Adam. Internals run in float64; stored weights are float32.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from . import tensor as T
from .errors import DivergenceError, InputError, UndefinedSimilarityError

_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def ssa_aggregate(z, eps=1e-5, gamma=None, beta=None):
    """Layer-normed mean over patch tokens 1..N ([CLS] at index 0 excluded)."""
    z = T.as_f32(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InputError(f"need at least one patch token, got shape {z.shape}")
    mean = z[1:].mean(axis=0, dtype=np.float32)
    return T.layer_norm(mean[None, :], gamma, beta, eps)[0]


def cls_feature(z, normalize=False, eps=1e-5):
    """The [CLS] token (row 0), optionally layer-normed like SSA."""
    z = T.as_f32(z)
    cls = z[0]
    if normalize:
        return T.layer_norm(cls[None, :], None, None, eps)[0]
    return cls.copy()


def extract_feature(z, kind, eps=1e-5):
    if kind == "ssa":
        return ssa_aggregate(z, eps)
    if kind == "cls":
        return cls_feature(z)
    raise InputError(f"unknown feature kind {kind!r}")


@dataclass
class TextBank:
    """Unit-norm class embeddings [K, e] plus the logit temperature."""

    embeddings: np.ndarray
    logit_scale: float = 100.0

    def __post_init__(self):
        self.embeddings = T.as_f32(self.embeddings)
        if self.embeddings.ndim != 2:
            raise InputError("text bank must be a [K, e] matrix")
        if self.logit_scale <= 0:
            raise InputError("logit_scale must be > 0")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise InputError("text bank rows must be unit-norm within 1e-4")

    @property
    def num_classes(self):
        return self.embeddings.shape[0]


@dataclass
class ExitHead:
    """Two-layer MLP d -> d -> e with GELU, attached at one layer."""

    layer: int
    w1: np.ndarray  # [d, d]
    b1: np.ndarray  # [d]
    w2: np.ndarray  # [e, d]
    b2: np.ndarray  # [e]
    supervision: str = "hard"
    seed: Optional[int] = None


def init_head(layer, d, e, rng, seed=None):
    """Scaled-uniform fan-in initialization."""
    lim1 = 1.0 / np.sqrt(d)
    head = ExitHead(
        layer=layer,
        w1=rng.uniform(-lim1, lim1, size=(d, d)).astype(np.float32),
        b1=np.zeros(d, dtype=np.float32),
        w2=rng.uniform(-lim1, lim1, size=(e, d)).astype(np.float32),
        b2=np.zeros(e, dtype=np.float32),
        seed=seed,
    )
    return head


def head_embed(features, head):
    """MLP output before unit-normalization; features is [S, d] or [d]."""
    single = features.ndim == 1
    x = T.as_f32(np.atleast_2d(features))
    h = T.gelu(x @ head.w1.T + head.b1)
    emb = h @ head.w2.T + head.b2
    return emb[0] if single else emb


def head_forward(features, head, bank):
    """Class probabilities: softmax(logit_scale * cos(embed, bank rows))."""
    single = features.ndim == 1
    emb = np.atleast_2d(head_embed(features, head))
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UndefinedSimilarityError("head produced a zero embedding")
    unit = emb / norms
    logits = np.float32(bank.logit_scale) * (unit @ bank.embeddings.T)
    probs = T.softmax(logits)
    return probs[0] if single else probs


@dataclass
class HeadTrainConfig:
    supervision: str = "hard"      # "hard" | "distill"
    distill_weight: float = 0.5    # lambda, only used in distill mode
    lr: float = 5e-4
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.supervision not in ("hard", "distill"):
            raise InputError(f"unknown supervision {self.supervision!r}")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise InputError("distill_weight must lie in [0, 1]")


def _gelu64(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu64_grad(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi


def head_loss_and_grads(params, x, y, bank_emb, logit_scale, lam=0.0, teacher=None):
    """Loss and analytic gradients for one batch, in float64.

    loss = (1 - lam) * CE(softmax(s * cos(emb, bank)), y)
         + lam * mean(1 - cos(emb, teacher))
    """
    w1, b1, w2, b2 = params
    s = x.shape[0]
    h_pre = x @ w1.T + b1
    h = _gelu64(h_pre)
    emb = h @ w2.T + b2
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DivergenceError("zero embedding during training")
    unit = emb / norms
    logits = logit_scale * (unit @ bank_emb.T)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)

    ce = -np.mean(np.log(np.clip(probs[np.arange(s), y], 1e-300, None)))
    d_logits = (probs.copy() * (1.0 - lam)) / s
    d_logits[np.arange(s), y] -= (1.0 - lam) / s
    d_unit = logit_scale * (d_logits @ bank_emb)

    loss = (1.0 - lam) * ce
    if lam > 0.0:
        cos = np.sum(unit * teacher, axis=1)
        loss += lam * np.mean(1.0 - cos)
        d_unit += -(lam / s) * teacher

    # through the normalization: d_emb = (I - u u^T) / ||emb|| applied row-wise
    d_emb = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / norms

    g_w2 = d_emb.T @ h
    g_b2 = d_emb.sum(axis=0)
    d_h = d_emb @ w2
    d_hpre = d_h * _gelu64_grad(h_pre)
    g_w1 = d_hpre.T @ x
    g_b1 = d_hpre.sum(axis=0)
    return loss, (g_w1, g_b1, g_w2, g_b2)


def train_head(features, labels, bank, cfg, layer=0, teacher=None, head=None):
    """Train one exit head with Adam; returns the head and the loss history."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InputError(f"features {x.shape} and labels {y.shape} disagree")
    lam = cfg.distill_weight if cfg.supervision == "distill" else 0.0
    if cfg.supervision == "distill":
        if teacher is None:
            raise InputError("distill mode requires teacher embeddings")
        teacher = np.asarray(teacher, dtype=np.float64)
        tn = np.linalg.norm(teacher, axis=1, keepdims=True)
        teacher = teacher / np.clip(tn, 1e-12, None)
    d = x.shape[1]
    e = bank.embeddings.shape[1]
    rng = np.random.default_rng(cfg.seed)
    if head is None:
        head = init_head(layer, d, e, rng, seed=cfg.seed)
    params = [head.w1.astype(np.float64), head.b1.astype(np.float64),
              head.w2.astype(np.float64), head.b2.astype(np.float64)]
    bank64 = bank.embeddings.astype(np.float64)

    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tb = teacher[idx] if lam > 0.0 else None
            loss, grads = head_loss_and_grads(
                params, x[idx], y[idx], bank64, bank.logit_scale, lam, tb)
            if not np.isfinite(loss):
                raise DivergenceError(
                    "non-finite head-training loss",
                    diagnostics={"epoch": epoch, "layer": layer, "loss": loss},
                )
            step += 1
            for i, g in enumerate(grads):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                mhat = m[i] / (1 - beta1 ** step)
                vhat = v[i] / (1 - beta2 ** step)
                params[i] -= cfg.lr * mhat / (np.sqrt(vhat) + eps)
            epoch_loss += loss
            nb += 1
        history.append(epoch_loss / nb)

    head.w1 = params[0].astype(np.float32)
    head.b1 = params[1].astype(np.float32)
    head.w2 = params[2].astype(np.float32)
    head.b2 = params[3].astype(np.float32)
    head.supervision = cfg.supervision
    return head, history


def train_heads(per_layer_features, labels, bank, cfg, teacher=None):
    """Train one head per layer; per_layer_features maps layer -> [S, d]."""
    heads = {}
    for layer in sorted(per_layer_features):
        head, _ = train_head(
            per_layer_features[layer], labels, bank, cfg, layer=layer, teacher=teacher)
        heads[layer] = head
    return heads
