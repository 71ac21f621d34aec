"""Suppression / deletion verdicts and the per-method audit report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .steering import RestorationRow

SUPPRESSION = "suppression"
DELETION = "deletion"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class VerdictThresholds:
    high: float = 0.5  # restored accuracy at or above this means the class came back
    low: float = 0.1  # restored accuracy at or below this everywhere means it is gone
    unlearned_max: float = 0.1  # suppression also requires the raw model to have forgotten

    def record(self) -> dict:
        return {"high": self.high, "low": self.low, "unlearned_max": self.unlearned_max}


def classify_verdict(rows: list[RestorationRow], thresholds: VerdictThresholds = VerdictThresholds()) -> str:
    if not rows:
        return INCONCLUSIVE
    best_restored = max(r.restored_accuracy for r in rows)
    worst_unlearned = max(r.unlearned_accuracy for r in rows)
    if best_restored >= thresholds.high and worst_unlearned <= thresholds.unlearned_max:
        return SUPPRESSION
    if best_restored <= thresholds.low:
        return DELETION
    return INCONCLUSIVE


@dataclass
class AuditReport:
    method: str
    category: str
    forget_class: int
    rows: list[RestorationRow]
    thresholds: VerdictThresholds = field(default_factory=VerdictThresholds)
    sae_mode: str = "separate"
    matching_cost: str = ""
    error_term: str = "drop"
    eval_split: str = "test"
    failed_unlearning: bool = False
    train_rows: list[RestorationRow] = field(default_factory=list)
    matchings: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return classify_verdict(self.rows, self.thresholds)

    def max_restoration_gain(self) -> float:
        """Largest restored-minus-unlearned gap across layers."""
        return max((r.delta for r in self.rows), default=float("nan"))

    def record(self) -> dict:
        return {
            "method": self.method,
            "category": self.category,
            "forget_class": self.forget_class,
            "verdict": self.verdict,
            "thresholds": self.thresholds.record(),
            "sae_mode": self.sae_mode,
            "matching_cost": self.matching_cost,
            "error_term": self.error_term,
            "eval_split": self.eval_split,
            "failed_unlearning": self.failed_unlearning,
            "layers": [r.record() for r in self.rows],
            "train_split_layers": [r.record() for r in self.train_rows],
            "matchings": self.matchings,
            "max_restoration_gain": self.max_restoration_gain(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AuditReport":
        def rows(items):
            fields = RestorationRow.__dataclass_fields__
            return [RestorationRow(**{k: v for k, v in item.items() if k in fields}) for item in items]

        return cls(
            method=rec["method"],
            category=rec["category"],
            forget_class=rec["forget_class"],
            rows=rows(rec["layers"]),
            thresholds=VerdictThresholds(**rec["thresholds"]),
            sae_mode=rec["sae_mode"],
            matching_cost=rec["matching_cost"],
            error_term=rec["error_term"],
            eval_split=rec["eval_split"],
            failed_unlearning=rec["failed_unlearning"],
            train_rows=rows(rec.get("train_split_layers", [])),
            matchings=rec.get("matchings", {}),
        )


def is_flagged(row: RestorationRow, thresholds: VerdictThresholds) -> bool:
    """Cells whose restored accuracy reaches the high threshold are highlighted in tables."""
    return bool(np.isfinite(row.restored_accuracy) and row.restored_accuracy >= thresholds.high)
