"""Outcome analysis: four-quadrant decomposition, rescue margin, gate
selectivity, exit distribution, and the factorial-ablation table."""

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import ConfigError, InputError


@dataclass
class EvalRecord:
    """Per-sample routing outcome."""

    sample_id: int
    exit_layer: int
    ee_correct: bool      # early-exit (routed) prediction correct
    full_correct: bool    # full-depth prediction correct
    gate_scores: Dict[int, float] = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "sample_id": self.sample_id,
            "exit_layer": self.exit_layer,
            "ee_correct": self.ee_correct,
            "full_correct": self.full_correct,
            "gate_scores": {str(k): v for k, v in self.gate_scores.items()},
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            sample_id=d["sample_id"],
            exit_layer=d["exit_layer"],
            ee_correct=bool(d["ee_correct"]),
            full_correct=bool(d["full_correct"]),
            gate_scores={int(k): float(v) for k, v in d.get("gate_scores", {}).items()},
        )


@dataclass
class QuadrantReport:
    both_correct: int
    rescue: int           # EE correct, full-depth wrong
    loss: int             # EE wrong, full-depth correct
    both_incorrect: int

    @property
    def size(self):
        return self.both_correct + self.rescue + self.loss + self.both_incorrect

    @property
    def net_gain(self):
        return self.rescue - self.loss

    @property
    def rescue_margin(self):
        """(rescue - loss) / size; identically Acc_EE - Acc_full."""
        return self.net_gain / self.size

    @property
    def proportions(self):
        n = self.size
        return {
            "both_correct": self.both_correct / n,
            "rescue": self.rescue / n,
            "loss": self.loss / n,
            "both_incorrect": self.both_incorrect / n,
        }

    @property
    def ee_accuracy(self):
        return (self.both_correct + self.rescue) / self.size

    @property
    def full_accuracy(self):
        return (self.both_correct + self.loss) / self.size

    def to_json_dict(self):
        return {
            "counts": {
                "both_correct": self.both_correct,
                "rescue": self.rescue,
                "loss": self.loss,
                "both_incorrect": self.both_incorrect,
            },
            "proportions": self.proportions,
            "net_gain": self.net_gain,
            "rescue_margin": self.rescue_margin,
            "ee_accuracy": self.ee_accuracy,
            "full_accuracy": self.full_accuracy,
        }


def four_quadrant(records):
    """Exact outcome counts over (EE correct) x (full-depth correct)."""
    records = list(records)
    if not records:
        raise InputError("no records")
    bc = sum(1 for r in records if r.ee_correct and r.full_correct)
    rescue = sum(1 for r in records if r.ee_correct and not r.full_correct)
    loss = sum(1 for r in records if not r.ee_correct and r.full_correct)
    bi = sum(1 for r in records if not r.ee_correct and not r.full_correct)
    return QuadrantReport(bc, rescue, loss, bi)


def gate_selectivity(records, full_layer=None):
    """(exit_fraction, exited_accuracy, held_accuracy).

    ``full_layer`` defaults to the maximum exit_layer seen in the records;
    samples at that layer are the held (full-inference) group. An empty
    group reports the None sentinel.
    """
    records = list(records)
    if not records:
        raise InputError("no records")
    if full_layer is None:
        full_layer = max(r.exit_layer for r in records)
    exited = [r for r in records if r.exit_layer != full_layer]
    held = [r for r in records if r.exit_layer == full_layer]
    exit_fraction = len(exited) / len(records)
    exited_acc = sum(r.ee_correct for r in exited) / len(exited) if exited else None
    held_acc = sum(r.ee_correct for r in held) / len(held) if held else None
    return exit_fraction, exited_acc, held_acc


def exit_distribution(records):
    """Fraction of samples exiting at each layer; fractions sum to 1."""
    records = list(records)
    if not records:
        raise InputError("no records")
    counts = {}
    for r in records:
        counts[r.exit_layer] = counts.get(r.exit_layer, 0) + 1
    n = len(records)
    return {L: c / n for L, c in sorted(counts.items())}


@dataclass
class ModeResult:
    """One factorial cell: (head, supervision, routing) -> metrics."""

    head: str          # "cls" | "ssa"
    supervision: str   # "hard" | "distill" | "none"
    routing: str       # "full" | "adaptive"
    accuracy: float
    flops_saving: float

    @property
    def key(self):
        return (self.head, self.supervision, self.routing)


def factorial_ablation(mode_results):
    """Comparison table plus pairwise deltas between requested mode cells.

    ``mode_results`` maps (head, supervision, routing) -> ModeResult. The
    standard contrasts (architecture, distillation, routing) are emitted
    for whichever cells are present.
    """
    results = {m.key: m for m in mode_results}
    rows = [
        {
            "head": m.head,
            "supervision": m.supervision,
            "routing": m.routing,
            "accuracy": m.accuracy,
            "flops_saving": m.flops_saving,
        }
        for m in sorted(results.values(), key=lambda m: m.key)
    ]

    named = {
        "architecture": (("ssa", "hard", "full"), ("cls", "none", "full")),
        "distillation": (("ssa", "distill", "full"), ("ssa", "hard", "full")),
        "routing_hard": (("ssa", "hard", "adaptive"), ("ssa", "hard", "full")),
        "routing_distill": (("ssa", "distill", "adaptive"), ("ssa", "distill", "full")),
        "total": (("ssa", "distill", "adaptive"), ("cls", "none", "full")),
    }
    contrasts = {}
    for name, (a, b) in named.items():
        if a in results and b in results:
            contrasts[name] = results[a].accuracy - results[b].accuracy
    return {"rows": rows, "contrasts": contrasts}


def write_records_json(records, path, meta=None):
    payload = {"meta": meta or {}, "records": [r.to_json_dict() for r in records]}
    with open(path, "w") as f:
        json.dump(payload, f)


def read_records_json(path):
    with open(path) as f:
        payload = json.load(f)
    return [EvalRecord.from_json_dict(d) for d in payload["records"]]


def write_quadrant_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["outcome", "count", "proportion"])
        props = report.proportions
        for name, count in [
            ("both_correct", report.both_correct),
            ("rescue", report.rescue),
            ("loss", report.loss),
            ("both_incorrect", report.both_incorrect),
        ]:
            w.writerow([name, count, props[name]])
        w.writerow(["net_gain", report.net_gain, report.rescue_margin])
