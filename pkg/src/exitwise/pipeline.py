"""Run configuration and the command implementations behind the CLI.

Artifacts live in the output directory: model.tarc / dataset.tarc,
profile.{json,csv}, heads.tarc, gate.json, sweep.{csv,json},
eval_records.json, analysis.json. Every report embeds the config hash and
seed, and identical configs reproduce identical reports.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import analysis as an
from . import routing as rt
from .encoder import ViTConfig, quantize_model, run_dual_path, terminal_embedding
from .errors import ConfigError
from .gate import GateParams, train_gate
from .heads import HeadTrainConfig, TextBank, extract_feature, head_forward, train_head
from .profiler import aggregate_profile, compute_inr
from .synthetic import (NoiseSchedule, load_dataset, load_heads, load_model,
                        make_dataset, make_model, save_dataset, save_heads,
                        save_model)
from .tensor import softmax


@dataclass
class RunConfig:
    model: dict
    dataset: dict
    quantization: str = "per_channel"
    exit_candidates: Optional[List[int]] = None
    kappa: float = 0.5
    grid: dict = field(default_factory=lambda: {"lo": 0.20, "hi": 0.92, "points": 25})
    gate_mode: str = "learned"
    supervision: str = "hard"
    distill_weight: float = 0.5
    head: dict = field(default_factory=lambda: {"lr": 5e-4, "epochs": 150, "batch_size": 64})
    gate: dict = field(default_factory=lambda: {"lr": 1e-2, "epochs": 2000})
    splits: dict = field(default_factory=lambda: {"head": 0.5, "gate": 0.25, "eval": 0.25})
    terminal_path: str = "ssa"   # "ssa" | "cls_proj"
    shared_tau: float = 0.5
    use_optimized_thresholds: bool = True
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.quantization not in ("per_channel", "per_tensor", "lossless"):
            raise ConfigError(f"unknown quantization {self.quantization!r}")
        noise = self.model.get("synthetic", {}).get("noise", {})
        if noise.get("kind") == "zero" and "quantization" not in self.raw:
            self.quantization = "lossless"

    @classmethod
    def from_dict(cls, d, seed_override=None):
        known = {f for f in cls.__dataclass_fields__ if f != "raw"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in d.items() if k in known}
        if seed_override is not None:
            kwargs["seed"] = seed_override
        cfg = cls(raw=dict(d), **kwargs)
        return cfg

    @classmethod
    def from_json(cls, path, seed_override=None):
        with open(path) as f:
            return cls.from_dict(json.load(f), seed_override)

    def config_hash(self):
        payload = dict(self.raw) if self.raw else self._as_plain()
        payload["seed"] = self.seed
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def _as_plain(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "raw"}

    def grid_points(self):
        g = self.grid
        return rt.default_grid(g.get("lo", 0.20), g.get("hi", 0.92), g.get("points", 25))


def _report_meta(cfg):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


# --- artifact resolution ---------------------------------------------------

def _model_path(cfg, out):
    return cfg.model.get("path") or os.path.join(out, "model.tarc")


def _dataset_path(cfg, out):
    return cfg.dataset.get("path") or os.path.join(out, "dataset.tarc")


def gen_synthetic(cfg, out):
    """Materialize synthetic model/dataset archives; deterministic by seed."""
    os.makedirs(out, exist_ok=True)
    msyn = cfg.model.get("synthetic")
    if msyn is None:
        raise ConfigError("gen-synthetic needs model.synthetic")
    noise = msyn.get("noise", {})
    schedule = NoiseSchedule(
        kind=noise.get("kind", "none"),
        strength=noise.get("strength", 8.0),
        spike_layer=noise.get("spike_layer"),
    )
    vcfg = ViTConfig(
        num_layers=msyn.get("num_layers", 4),
        dim=msyn.get("dim", 32),
        num_patches=msyn.get("num_patches", 16),
        num_heads=msyn.get("num_heads", 4),
        mlp_ratio=msyn.get("mlp_ratio", 4.0),
        embed_dim=msyn.get("embed_dim", 16),
    )
    logit_scale = msyn.get("logit_scale", 100.0)
    model = make_model(vcfg, schedule, seed=cfg.seed, logit_scale=logit_scale)
    save_model(_model_path(cfg, out), model)

    dsyn = cfg.dataset.get("synthetic")
    if dsyn is not None:
        tokens, labels, bank = make_dataset(
            vcfg,
            num_classes=dsyn.get("num_classes", 5),
            num_samples=dsyn.get("num_samples", 400),
            seed=cfg.seed + 1,
            token_noise=dsyn.get("token_noise", 0.5),
            cls_scale=dsyn.get("cls_scale", 0.2),
            logit_scale=logit_scale,
        )
        save_dataset(_dataset_path(cfg, out), tokens, labels, bank)
    return _model_path(cfg, out), _dataset_path(cfg, out)


def _require(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact: {what} ({path})")
    return path


def load_artifacts(cfg, out):
    """Load (generating synthetic archives on demand) model and dataset."""
    mpath, dpath = _model_path(cfg, out), _dataset_path(cfg, out)
    if not (os.path.exists(mpath) and os.path.exists(dpath)):
        if cfg.model.get("synthetic"):
            gen_synthetic(cfg, out)
        else:
            _require(mpath, "model archive")
            _require(dpath, "dataset archive")
    model = quantize_model(load_model(mpath), cfg.quantization)
    tokens, labels, bank = load_dataset(dpath)
    return model, tokens, labels, bank


def split_indices(num_samples, splits, seed):
    """Deterministic head/gate/eval split of sample indices."""
    order = np.random.default_rng(seed).permutation(num_samples)
    n_head = int(round(splits.get("head", 0.5) * num_samples))
    n_gate = int(round(splits.get("gate", 0.25) * num_samples))
    return {
        "head": order[:n_head],
        "gate": order[n_head:n_head + n_gate],
        "eval": order[n_head + n_gate:],
    }


def compute_traces(model, tokens):
    return [run_dual_path(tokens[i], model) for i in range(tokens.shape[0])]


def features_for(traces, layers, kind="ssa", path="int8"):
    out = {}
    for L in layers:
        feats = []
        for t in traces:
            z = t.z_int8[L] if path == "int8" else t.z_fp32[L]
            feats.append(extract_feature(z, kind))
        out[L] = np.stack(feats)
    return out


def teacher_embeddings(traces, model):
    """FP32 terminal image embeddings (the distillation teacher signal)."""
    return np.stack([
        terminal_embedding(t.z_fp32[-1], model, "fp32") for t in traces])


def candidate_layers(cfg, num_layers):
    if cfg.exit_candidates:
        cands = sorted(cfg.exit_candidates)
        if any(not 1 <= L < num_layers for L in cands):
            raise ConfigError(f"exit candidates must lie in 1..{num_layers - 1}")
        return cands
    return list(range(1, num_layers))


# --- commands ---------------------------------------------------------------

def cmd_profile(cfg, out):
    model, tokens, labels, bank = load_artifacts(cfg, out)
    traces = compute_traces(model, tokens)
    profile = aggregate_profile(traces, model)
    profile.meta = _report_meta(cfg)
    profile.write_json(os.path.join(out, "profile.json"))
    profile.write_csv(os.path.join(out, "profile.csv"))
    return profile


def cmd_train_heads(cfg, out):
    model, tokens, labels, bank = load_artifacts(cfg, out)
    idx = split_indices(tokens.shape[0], cfg.splits, cfg.seed)["head"]
    traces = compute_traces(model, tokens[idx])
    cands = candidate_layers(cfg, model.config.num_layers)
    layers = cands + [model.config.num_layers]
    feats = features_for(traces, layers)
    teacher = teacher_embeddings(traces, model) if cfg.supervision == "distill" else None
    tc = HeadTrainConfig(
        supervision=cfg.supervision,
        distill_weight=cfg.distill_weight,
        lr=cfg.head.get("lr", 5e-4),
        epochs=cfg.head.get("epochs", 150),
        batch_size=cfg.head.get("batch_size", 64),
        seed=cfg.seed,
    )
    heads = {}
    for L in layers:
        heads[L], _ = train_head(feats[L], labels[idx], bank, tc, layer=L, teacher=teacher)
    save_heads(os.path.join(out, "heads.tarc"), heads)
    with open(os.path.join(out, "heads_manifest.json"), "w") as f:
        json.dump({
            **_report_meta(cfg),
            "layers": layers,
            "supervision": cfg.supervision,
        }, f, indent=2)
    return heads


def gate_training_data(traces, labels, heads, bank, candidates):
    """Per-layer gate features and exit-correctness labels."""
    feats, labs = {}, {}
    from .gate import extract_features
    for L in candidates:
        rows, ys = [], []
        for t, y in zip(traces, labels):
            z = t.z_int8[L]
            probs = head_forward(extract_feature(z, "ssa"), heads[L], bank)
            rows.append(extract_features(probs, z).as_array())
            ys.append(1.0 if int(np.argmax(probs)) == y else 0.0)
        feats[L] = np.stack(rows)
        labs[L] = np.array(ys)
    return feats, labs


def cmd_train_gate(cfg, out):
    model, tokens, labels, bank = load_artifacts(cfg, out)
    heads = load_heads(_require(os.path.join(out, "heads.tarc"), "trained heads"))
    idx = split_indices(tokens.shape[0], cfg.splits, cfg.seed)["gate"]
    traces = compute_traces(model, tokens[idx])
    cands = candidate_layers(cfg, model.config.num_layers)
    feats, labs = gate_training_data(traces, labels[idx], heads, bank, cands)
    gate = train_gate(feats, labs, lr=cfg.gate.get("lr", 1e-2),
                      epochs=cfg.gate.get("epochs", 2000), seed=cfg.seed)
    with open(os.path.join(out, "gate.json"), "w") as f:
        json.dump({**_report_meta(cfg), **gate.to_json_dict()}, f, indent=2)
    return gate


def _load_gate(out):
    path = _require(os.path.join(out, "gate.json"), "trained gate")
    with open(path) as f:
        return GateParams.from_json_dict(json.load(f))


def _eval_table(cfg, out):
    """Dual traces + exit table on the eval split, with PLP applied."""
    model, tokens, labels, bank = load_artifacts(cfg, out)
    heads = load_heads(_require(os.path.join(out, "heads.tarc"), "trained heads"))
    idx = split_indices(tokens.shape[0], cfg.splits, cfg.seed)["eval"]
    traces = compute_traces(model, tokens[idx])
    cands = candidate_layers(cfg, model.config.num_layers)
    if len(traces) >= 2:
        cands = rt.prune_pathological(compute_inr(traces), cands, cfg.kappa)
    table = rt.build_exit_table(
        traces, labels[idx], model, heads, bank, cands, cfg.terminal_path)
    return model, table


def _table_scores(cfg, out, table):
    if cfg.gate_mode == "heuristic":
        return rt.table_scores(table, None, "heuristic")
    return rt.table_scores(table, _load_gate(out), "learned")


def cmd_sweep(cfg, out):
    model, table = _eval_table(cfg, out)
    scores = _table_scores(cfg, out, table)
    fm = rt.FlopsModel.uniform(model.config.num_layers)
    rows = rt.sweep_thresholds(table, scores, fm, cfg.grid_points())
    best_thresholds, best_row = rt.optimize_thresholds(table, scores, fm, cfg.grid_points())

    with open(os.path.join(out, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["thresholds", "accuracy", "flops_saving"]
                   + [f"exit_frac_{L}" for L in table.layers + [table.num_layers]])
        for row in rows:
            w.writerow([json.dumps(row["thresholds"]), row["accuracy"], row["flops_saving"]]
                       + [row["exit_fractions"][L] for L in table.layers + [table.num_layers]])
    frontier = rt.pareto_frontier(
        [(r["flops_saving"], r["accuracy"]) for r in rows])
    with open(os.path.join(out, "sweep.json"), "w") as f:
        json.dump({
            **_report_meta(cfg),
            "exit_set": table.layers,
            "rows": [{k: v for k, v in r.items() if k != "records"} for r in rows],
            "pareto_frontier": frontier,
            "optimized": {
                "thresholds": best_thresholds,
                "accuracy": best_row["accuracy"],
                "flops_saving": best_row["flops_saving"],
            },
        }, f, indent=2)
    return rows, best_thresholds


def _resolve_thresholds(cfg, out, table):
    opt_path = os.path.join(out, "sweep.json")
    if cfg.use_optimized_thresholds and os.path.exists(opt_path):
        with open(opt_path) as f:
            opt = json.load(f)["optimized"]["thresholds"]
        thresholds = {int(k): float(v) for k, v in opt.items()}
        if all(L in thresholds for L in table.layers):
            return thresholds
    return {L: cfg.shared_tau for L in table.layers}


def cmd_evaluate(cfg, out):
    model, table = _eval_table(cfg, out)
    scores = _table_scores(cfg, out, table)
    thresholds = _resolve_thresholds(cfg, out, table)
    fm = rt.FlopsModel.uniform(model.config.num_layers)
    exit_layers, preds, records = rt.simulate_policy(table, thresholds, scores)
    accuracy = float(np.mean(preds == table.labels))
    saving = rt.flops_saving(exit_layers, fm, exit_set=table.layers)
    an.write_records_json(records, os.path.join(out, "eval_records.json"),
                          meta={**_report_meta(cfg), "thresholds": thresholds,
                                "exit_set": table.layers, "accuracy": accuracy,
                                "flops_saving": saving})
    return records, accuracy, saving


def cmd_analyze(cfg, out):
    records = an.read_records_json(
        _require(os.path.join(out, "eval_records.json"), "evaluation records"))
    quad = an.four_quadrant(records)
    frac, exited_acc, held_acc = an.gate_selectivity(records)
    dist = an.exit_distribution(records)
    report = {
        **_report_meta(cfg),
        "quadrants": quad.to_json_dict(),
        "gate_selectivity": {
            "exit_fraction": frac,
            "exited_accuracy": exited_acc,
            "held_accuracy": held_acc,
        },
        "exit_distribution": {str(k): v for k, v in dist.items()},
    }
    with open(os.path.join(out, "analysis.json"), "w") as f:
        json.dump(report, f, indent=2)
    an.write_quadrant_csv(quad, os.path.join(out, "quadrant.csv"))
    return report


def cmd_embed(cfg, out):
    """FP32 terminal embeddings for every sample (cross-implementation oracle)."""
    from .archive import write_archive
    model, tokens, labels, bank = load_artifacts(cfg, out)
    traces = compute_traces(model, tokens)
    emb = teacher_embeddings(traces, model)
    write_archive(os.path.join(out, "embeddings.tarc"),
                  {"embeddings": emb.astype(np.float32)})
    return emb


# --- factorial ablation harness ---------------------------------------------

def run_factorial(cfg, out, modes=None):
    """Train and evaluate the factorial cells; returns the comparison table.

    Cells: (head, supervision, routing). The (cls, none, full) cell is the
    backbone terminal path without any trained head.
    """
    default_modes = [
        ("cls", "none", "full"),
        ("ssa", "hard", "full"),
        ("ssa", "distill", "full"),
        ("ssa", "hard", "adaptive"),
        ("ssa", "distill", "adaptive"),
    ]
    modes = modes or default_modes
    model, tokens, labels, bank = load_artifacts(cfg, out)
    idx = split_indices(tokens.shape[0], cfg.splits, cfg.seed)
    head_traces = compute_traces(model, tokens[idx["head"]])
    gate_traces = compute_traces(model, tokens[idx["gate"]])
    eval_traces = compute_traces(model, tokens[idx["eval"]])
    eval_labels = labels[idx["eval"]]
    L_max = model.config.num_layers
    cands = candidate_layers(cfg, L_max)
    if len(eval_traces) >= 2:
        cands = rt.prune_pathological(compute_inr(eval_traces), cands, cfg.kappa)
    fm = rt.FlopsModel.uniform(L_max)
    grid = cfg.grid_points()

    teacher = teacher_embeddings(head_traces, model)
    results = []
    trained = {}

    def heads_for(supervision):
        if supervision in trained:
            return trained[supervision]
        tc = HeadTrainConfig(
            supervision=supervision,
            distill_weight=cfg.distill_weight,
            lr=cfg.head.get("lr", 5e-4),
            epochs=cfg.head.get("epochs", 150),
            batch_size=cfg.head.get("batch_size", 64),
            seed=cfg.seed,
        )
        layers = cands + [L_max]
        feats = features_for(head_traces, layers)
        t = teacher if supervision == "distill" else None
        heads = {}
        for L in layers:
            heads[L], _ = train_head(feats[L], labels[idx["head"]], bank, tc,
                                     layer=L, teacher=t)
        trained[supervision] = heads
        return heads

    for head_kind, supervision, policy in modes:
        if head_kind == "cls" and supervision == "none":
            preds = []
            for t in eval_traces:
                emb = terminal_embedding(t.z_int8[-1], model, "int8")
                logits = bank.logit_scale * (emb / np.linalg.norm(emb)) @ bank.embeddings.T
                preds.append(int(np.argmax(softmax(logits[None, :])[0])))
            acc = float(np.mean(np.asarray(preds) == eval_labels))
            results.append(an.ModeResult(head_kind, supervision, policy, acc, 0.0))
            continue
        if head_kind != "ssa":
            raise ConfigError(f"unsupported factorial cell {(head_kind, supervision, policy)}")
        heads = heads_for(supervision)
        if policy == "full":
            preds = [int(np.argmax(head_forward(
                extract_feature(t.z_int8[-1], "ssa"), heads[L_max], bank)))
                for t in eval_traces]
            acc = float(np.mean(np.asarray(preds) == eval_labels))
            results.append(an.ModeResult(head_kind, supervision, policy, acc, 0.0))
        else:
            gfeats, glabs = gate_training_data(
                gate_traces, labels[idx["gate"]], heads, bank, cands)
            gate = train_gate(gfeats, glabs, lr=cfg.gate.get("lr", 1e-2),
                              epochs=cfg.gate.get("epochs", 2000), seed=cfg.seed)
            table = rt.build_exit_table(
                eval_traces, eval_labels, model, heads, bank, cands, "ssa")
            scores = rt.table_scores(table, gate, "learned")
            _, row = rt.optimize_thresholds(table, scores, fm, grid)
            results.append(an.ModeResult(
                head_kind, supervision, policy, row["accuracy"], row["flops_saving"]))

    report = an.factorial_ablation(results)
    report.update(_report_meta(cfg))
    with open(os.path.join(out, "factorial.json"), "w") as f:
        json.dump(report, f, indent=2)
    return report, results
