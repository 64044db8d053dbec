"""Layer-wise quantization-noise statistics from dual-path traces.

Per layer L (1-indexed, layer 0 is the input embedding):
  delta_nat(L)   = ||z_fp32[L] - z_fp32[L-1]||_2 over the flattened tensor
  delta_quant(L) = ||z_int8[L] - z_fp32[L]||_2
  ratio          = delta_quant / delta_nat (NaN when delta_nat == 0)
  cosine         = cos(feature(z_int8[L]), feature(z_fp32[L]))
  inr            = ||E_x[z_L(x)]||^2 / Var_x[eps_L(x)], eps = int8 - fp32
  act_max        = max |z_int8[L]| over the dataset
  quant_mse      = mean weight MSE across the block's quantized linears

Var_x[eps] is the mean over tensor elements of the per-element variance
across samples; an exactly-zero variance is reported as the +inf sentinel.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .encoder import terminal_embedding
from .errors import InputError, UndefinedSimilarityError
from .heads import cls_feature, ssa_aggregate
from .quantize import quant_mse


@dataclass
class NoiseProfile:
    delta_nat: List[float]
    delta_quant: List[float]
    ratio: List[float]
    cosine_sim: List[float]
    inr: List[float]
    act_max: List[float]
    quant_mse: List[float]
    num_samples: int = 0
    feature: str = "ssa"
    meta: dict = field(default_factory=dict)

    @property
    def num_layers(self):
        return len(self.delta_nat)

    def rows(self):
        for i in range(self.num_layers):
            yield {
                "layer": i + 1,
                "delta_nat": self.delta_nat[i],
                "delta_quant": self.delta_quant[i],
                "ratio": self.ratio[i],
                "cosine": self.cosine_sim[i],
                "inr": self.inr[i],
                "act_max": self.act_max[i],
                "quant_mse": self.quant_mse[i],
            }

    def write_csv(self, path):
        cols = ["layer", "delta_nat", "delta_quant", "ratio", "cosine",
                "inr", "act_max", "quant_mse"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for row in self.rows():
                w.writerow(row)

    def write_json(self, path):
        payload = {
            "num_samples": self.num_samples,
            "feature": self.feature,
            "meta": self.meta,
            "layers": [
                {k: _json_safe(v) for k, v in row.items()} for row in self.rows()
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)


def _json_safe(x):
    # keep the emitted JSON strictly standard: inf/nan become strings
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return x


def layer_deltas(trace):
    """Per-layer (delta_nat, delta_quant) over flattened activations."""
    nat, quant = [], []
    for L in range(1, len(trace.z_fp32)):
        f_now = trace.z_fp32[L].astype(np.float64)
        f_prev = trace.z_fp32[L - 1].astype(np.float64)
        q_now = trace.z_int8[L].astype(np.float64)
        nat.append(float(np.linalg.norm((f_now - f_prev).ravel())))
        quant.append(float(np.linalg.norm((q_now - f_now).ravel())))
    return nat, quant


def _cosine(a, b):
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine of a zero vector is undefined")
    if np.array_equal(a, b):
        return 1.0  # exact for the lossless path
    return float(np.dot(a, b) / (na * nb))


def cosine_drift(trace, feature="ssa"):
    """cos(feature(z_int8[L]), feature(z_fp32[L])) for L = 1..L_max."""
    extract = ssa_aggregate if feature == "ssa" else cls_feature
    if feature not in ("ssa", "cls"):
        raise InputError(f"unknown feature {feature!r}")
    out = []
    for L in range(1, len(trace.z_fp32)):
        out.append(_cosine(extract(trace.z_int8[L]), extract(trace.z_fp32[L])))
    return out


def compute_inr(traces, numerator_path="fp32"):
    """Information-to-noise ratio per layer; +inf sentinel when noise var is 0."""
    if len(traces) < 2:
        raise InputError("INR needs at least 2 samples for a defined variance")
    num_layers = traces[0].num_layers
    out = []
    for L in range(1, num_layers + 1):
        zs = np.stack([
            (t.z_fp32[L] if numerator_path == "fp32" else t.z_int8[L]).astype(np.float64)
            for t in traces
        ])
        eps = np.stack([
            t.z_int8[L].astype(np.float64) - t.z_fp32[L].astype(np.float64)
            for t in traces
        ])
        signal = float(np.sum(zs.mean(axis=0) ** 2))
        noise_var = float(np.mean(np.var(eps, axis=0)))
        out.append(signal / noise_var if noise_var > 0 else float("inf"))
    return out


def aggregate_profile(traces, model=None, feature="ssa", numerator_path="fp32"):
    """Dataset-mean noise profile; single-threaded ordered reduction.

    With a model, the final layer's cosine uses the terminal embedding
    instead of the per-layer feature, and per-layer weight quant_mse is
    reported from the blocks' quantized twins.
    """
    traces = list(traces)
    if not traces:
        raise InputError("empty dataset")
    num_layers = traces[0].num_layers

    nat_sum = np.zeros(num_layers)
    quant_sum = np.zeros(num_layers)
    cos_sum = np.zeros(num_layers)
    act_max = np.zeros(num_layers)
    for t in traces:
        nat, quant = layer_deltas(t)
        nat_sum += nat
        quant_sum += quant
        cos = cosine_drift(t, feature)
        if model is not None:
            cos[-1] = _cosine(
                terminal_embedding(t.z_int8[-1], model, "fp32"),
                terminal_embedding(t.z_fp32[-1], model, "fp32"),
            )
        cos_sum += cos
        for L in range(1, num_layers + 1):
            act_max[L - 1] = max(act_max[L - 1], float(np.abs(t.z_int8[L]).max()))

    n = len(traces)
    nat_mean = nat_sum / n
    quant_mean = quant_sum / n
    ratio = [q / d if d > 0 else float("nan") for d, q in zip(nat_mean, quant_mean)]

    if n >= 2:
        inr = compute_inr(traces, numerator_path)
    else:
        inr = [float("nan")] * num_layers

    mse = [float("nan")] * num_layers
    if model is not None:
        for i, bw in enumerate(model.blocks):
            vals = [quant_mse(lw.w, lw.q) for lw in bw.linears().values() if lw.q is not None]
            if vals:
                mse[i] = float(np.mean(vals))

    return NoiseProfile(
        delta_nat=list(map(float, nat_mean)),
        delta_quant=list(map(float, quant_mean)),
        ratio=ratio,
        cosine_sim=list(cos_sum / n),
        inr=inr,
        act_max=list(map(float, act_max)),
        quant_mse=mse,
        num_samples=n,
        feature=feature,
    )
