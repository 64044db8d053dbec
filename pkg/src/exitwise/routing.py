"""Exit routing: pathological-layer pruning, per-sample execution, FLOPs
accounting, threshold sweeps, and Pareto-frontier extraction.

Routing is first-passing-exit: the INT8 path runs block by block and the
sample leaves at the first candidate layer whose gate score exceeds that
layer's threshold; blocks past the exit are never executed. Sweeps run on
a precomputed per-sample exit table (one full evaluation per sample, then
cheap threshold re-application), which the routing tests cross-check
against the block-by-block path.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .analysis import EvalRecord
from .encoder import forward_block, input_stream, terminal_embedding
from .errors import ConfigError, EmptyExitSetWarning, InputError
from .gate import GateFeatures, extract_features, gate_score
from .heads import extract_feature, head_forward
from .tensor import softmax

DEFAULT_GRID_LO = 0.20
DEFAULT_GRID_HI = 0.92
DEFAULT_GRID_POINTS = 25


def default_grid(lo=DEFAULT_GRID_LO, hi=DEFAULT_GRID_HI, points=DEFAULT_GRID_POINTS):
    return np.linspace(lo, hi, points)


@dataclass
class RoutingPolicy:
    exit_set: List[int]                 # ascending subset of {1..L_max-1}
    thresholds: Dict[int, float]        # tau per exit layer
    gate_mode: str = "learned"          # "learned" | "heuristic"

    def __post_init__(self):
        self.exit_set = sorted(self.exit_set)
        for L in self.exit_set:
            if L not in self.thresholds:
                raise ConfigError(f"no threshold for exit layer {L}")
            if not 0.0 <= self.thresholds[L] <= 1.0:
                raise ConfigError(f"threshold for layer {L} outside [0, 1]")
        if self.gate_mode not in ("learned", "heuristic"):
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")


@dataclass
class FlopsModel:
    block_flops: List[float]            # per block, len L_max
    head_flops: float = 0.0
    gate_flops: float = 0.0
    include_overhead: bool = False

    def __post_init__(self):
        if any(f <= 0 for f in self.block_flops):
            raise ConfigError("block flop counts must be positive")

    @classmethod
    def uniform(cls, num_layers, **kw):
        return cls(block_flops=[1.0] * num_layers, **kw)

    def cumulative(self, layer):
        return float(sum(self.block_flops[:layer]))

    @property
    def full_depth(self):
        return self.cumulative(len(self.block_flops))


def prune_pathological(inr, candidates, kappa=0.5):
    """Drop candidates whose INR falls below kappa * mean over candidates.

    +inf sentinels (zero-noise layers) are excluded from the mean and are
    never pruned. An emptied exit set warns and falls back to full depth.
    """
    if isinstance(inr, dict):
        get = inr.__getitem__
    else:
        get = lambda L: inr[L - 1]
    vals = {L: float(get(L)) for L in candidates}
    finite = [v for v in vals.values() if np.isfinite(v)]
    if not finite:
        return sorted(candidates)
    mean = float(np.mean(finite))
    kept = sorted(L for L, v in vals.items() if not (v < kappa * mean))
    if not kept:
        warnings.warn(
            "pathological-layer pruning removed every exit candidate; "
            "routing falls back to full depth",
            EmptyExitSetWarning,
        )
    return kept


@dataclass
class RouteResult:
    prediction: int
    exit_layer: int
    features: Dict[int, GateFeatures]
    blocks_executed: int


def _score(features, policy, gate, layer):
    if policy.gate_mode == "heuristic":
        return features.confidence
    if gate is None:
        raise ConfigError("learned gate_mode requires gate parameters")
    return gate_score(features, gate, layer)


def _terminal_probs(z, model, heads, bank, terminal, mode="int8"):
    cfg = model.config
    if terminal == "cls_proj":
        emb = terminal_embedding(z, model, mode)
        norm = np.linalg.norm(emb)
        logits = bank.logit_scale * (emb / norm) @ bank.embeddings.T
        return softmax(logits[None, :])[0]
    if cfg.num_layers not in heads:
        raise ConfigError("terminal='ssa' needs a head at the final layer")
    return head_forward(extract_feature(z, "ssa"), heads[cfg.num_layers], bank)


def route_sample(tokens, model, heads, bank, gate, policy, terminal="ssa"):
    """Run the INT8 path with first-passing-exit semantics for one sample."""
    cfg = model.config
    for L in policy.exit_set:
        if L not in heads:
            raise ConfigError(f"no trained head for exit layer {L}")
    z = input_stream(tokens, model)
    executed = 0
    feats = {}
    exits = iter(policy.exit_set)
    next_exit = next(exits, None)
    for L in range(1, cfg.num_layers + 1):
        z = forward_block(z, model.blocks[L - 1], cfg, "int8")
        executed += 1
        if L == next_exit:
            probs = head_forward(extract_feature(z, "ssa"), heads[L], bank)
            f = extract_features(probs, z)
            feats[L] = f
            if _score(f, policy, gate, L) > policy.thresholds[L]:
                return RouteResult(int(np.argmax(probs)), L, feats, executed)
            next_exit = next(exits, None)
    probs = _terminal_probs(z, model, heads, bank, terminal)
    return RouteResult(int(np.argmax(probs)), cfg.num_layers, feats, executed)


def flops_saving(exit_layers, fm, exit_set=None):
    """1 - E[flops to exit (+ overhead if enabled)] / full-depth flops."""
    exit_layers = list(exit_layers)
    if not exit_layers:
        raise InputError("no routed samples")
    full = fm.full_depth
    total = 0.0
    for L in exit_layers:
        cost = fm.cumulative(L)
        if fm.include_overhead:
            if exit_set is None:
                raise InputError("include_overhead needs the exit set")
            visited = sum(1 for e in exit_set if e <= L)
            cost += visited * (fm.head_flops + fm.gate_flops)
        total += cost
    return 1.0 - (total / len(exit_layers)) / full


@dataclass
class ExitTable:
    """Cached per-sample evaluation at every candidate layer and full depth."""

    layers: List[int]                 # candidate exit layers, ascending
    num_layers: int                   # L_max
    preds: np.ndarray                 # [S, C] int
    correct: np.ndarray               # [S, C] bool
    features: np.ndarray              # [S, C, 3] raw gate features
    full_pred: np.ndarray             # [S] int
    full_correct: np.ndarray          # [S] bool
    labels: np.ndarray                # [S] int

    @property
    def num_samples(self):
        return self.labels.shape[0]


def build_exit_table(traces, labels, model, heads, bank, candidates, terminal="ssa"):
    """Evaluate heads and gate features at every candidate layer once."""
    candidates = sorted(candidates)
    labels = np.asarray(labels)
    S, C = len(traces), len(candidates)
    preds = np.zeros((S, C), dtype=np.int64)
    feats = np.zeros((S, C, 3), dtype=np.float64)
    full_pred = np.zeros(S, dtype=np.int64)
    for s, t in enumerate(traces):
        for c, L in enumerate(candidates):
            z = t.z_int8[L]
            probs = head_forward(extract_feature(z, "ssa"), heads[L], bank)
            preds[s, c] = int(np.argmax(probs))
            feats[s, c] = extract_features(probs, z).as_array()
        full_pred[s] = int(np.argmax(
            _terminal_probs(t.z_int8[-1], model, heads, bank, terminal)))
    return ExitTable(
        layers=candidates,
        num_layers=model.config.num_layers,
        preds=preds,
        correct=preds == labels[:, None],
        features=feats,
        full_pred=full_pred,
        full_correct=full_pred == labels,
        labels=labels,
    )


def table_scores(table, gate, gate_mode="learned"):
    """Gate scores [S, C] for the cached table."""
    if gate_mode == "heuristic":
        return table.features[:, :, 0].copy()
    scores = np.zeros((table.num_samples, len(table.layers)))
    for c, L in enumerate(table.layers):
        for s in range(table.num_samples):
            f = GateFeatures(*table.features[s, c])
            scores[s, c] = gate_score(f, gate, L)
    return scores


def simulate_policy(table, thresholds, scores):
    """Apply first-passing-exit thresholds to cached scores.

    Returns (exit_layers [S], predictions [S], records).
    """
    S = table.num_samples
    exit_layers = np.full(S, table.num_layers, dtype=np.int64)
    preds = table.full_pred.copy()
    records = []
    for s in range(S):
        for c, L in enumerate(table.layers):
            if scores[s, c] > thresholds[L]:
                exit_layers[s] = L
                preds[s] = table.preds[s, c]
                break
        records.append(EvalRecord(
            sample_id=s,
            exit_layer=int(exit_layers[s]),
            ee_correct=bool(preds[s] == table.labels[s]),
            full_correct=bool(table.full_correct[s]),
            gate_scores={int(L): float(scores[s, c])
                         for c, L in enumerate(table.layers)
                         if L <= exit_layers[s]},
        ))
    return exit_layers, preds, records


def _evaluate(table, thresholds, scores, fm):
    exit_layers, preds, records = simulate_policy(table, thresholds, scores)
    accuracy = float(np.mean(preds == table.labels))
    saving = flops_saving(exit_layers, fm, exit_set=table.layers)
    fractions = {L: float(np.mean(exit_layers == L))
                 for L in table.layers + [table.num_layers]}
    return {
        "thresholds": dict(thresholds),
        "accuracy": accuracy,
        "flops_saving": saving,
        "exit_fractions": fractions,
        "records": records,
    }


def sweep_thresholds(table, scores, fm=None, grid=None):
    """Shared-tau sweep over the grid; one row per grid point, grid order."""
    if fm is None:
        fm = FlopsModel.uniform(table.num_layers)
    if grid is None:
        grid = default_grid()
    rows = []
    for tau in grid:
        thresholds = {L: float(tau) for L in table.layers}
        rows.append(_evaluate(table, thresholds, scores, fm))
    return rows


def optimize_thresholds(table, scores, fm=None, grid=None, passes=2):
    """Per-layer thresholds: independent axis sweeps, then coordinate refinement.

    Objective: accuracy first, FLOPs saving as the tie-breaker. Deterministic.
    """
    if fm is None:
        fm = FlopsModel.uniform(table.num_layers)
    if grid is None:
        grid = default_grid()
    thresholds = {L: float(grid[-1]) for L in table.layers}
    for _ in range(passes):
        for L in table.layers:
            best = None
            for tau in grid:
                trial = dict(thresholds)
                trial[L] = float(tau)
                row = _evaluate(table, trial, scores, fm)
                key = (row["accuracy"], row["flops_saving"])
                if best is None or key > best[0]:
                    best = (key, float(tau))
            thresholds[L] = best[1]
    return thresholds, _evaluate(table, thresholds, scores, fm)


def pareto_frontier(points):
    """Maximal non-dominated subset of (flops_saving, accuracy) pairs."""
    pts = [(float(f), float(a)) for f, a in points]

    def dominated(p):
        return any(
            q[0] >= p[0] and q[1] >= p[1] and (q[0] > p[0] or q[1] > p[1])
            for q in pts
        )

    return sorted((p for p in pts if not dominated(p)), key=lambda p: p[0])
