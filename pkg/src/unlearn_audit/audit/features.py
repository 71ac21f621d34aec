"""Per-feature class statistics and expert-feature selection.

An SAE feature "activates" on a sample when its code value is strictly
positive. For feature ``j`` and class ``c``:

* precision = P(label == c | j active) = co_count / activation_count
* recall    = P(j active | label == c) = co_count / class_count
* f1        = 2PR / (P + R), and 0 when P + R == 0

Precision is NaN for features that never activate (recall likewise for classes
absent from the batch); their F1 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, SelectionError


@dataclass
class FeatureStats:
    activation_count: np.ndarray  # (m,)
    co_activation: np.ndarray  # (m, C)
    class_count: np.ndarray  # (C,)
    precision: np.ndarray  # (m, C)
    recall: np.ndarray  # (m, C)
    f1: np.ndarray  # (m, C)

    @property
    def total_samples(self) -> int:
        return int(self.class_count.sum())

    @property
    def num_features(self) -> int:
        return len(self.activation_count)

    @property
    def never_active(self) -> np.ndarray:
        return self.activation_count == 0

    @property
    def always_active(self) -> np.ndarray:
        return self.activation_count == self.total_samples


@dataclass
class ExpertFeatureSet:
    class_index: int
    indices: np.ndarray
    f1_scores: np.ndarray
    source: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.indices)

    def record(self) -> dict:
        return {
            "class": self.class_index,
            "indices": [int(i) for i in self.indices],
            "f1_scores": [float(s) for s in self.f1_scores],
            "source": self.source,
        }


def expert_count(k: int) -> int:
    """Number of experts kept per class for TopK sparsity ``k``: floor(5k/4)."""
    return (5 * k) // 4


def compute_feature_stats(code: np.ndarray, labels, num_classes: int) -> FeatureStats:
    code = np.asarray(code)
    labels = np.asarray(labels, dtype=np.int64)
    if code.ndim != 2 or labels.shape != (code.shape[0],):
        raise InputError(f"code {code.shape} and labels {labels.shape} do not line up")
    if code.shape[0] == 0:
        raise InputError("cannot compute feature statistics on an empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes})")
    active = (code > 0).astype(np.int64)
    onehot = np.zeros((len(labels), num_classes), dtype=np.int64)
    onehot[np.arange(len(labels)), labels] = 1
    activation_count = active.sum(axis=0)
    co = active.T @ onehot  # integer arithmetic, exact
    class_count = onehot.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(activation_count[:, None] > 0, co / activation_count[:, None], np.nan)
        recall = np.where(class_count[None, :] > 0, co / class_count[None, :], np.nan)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return FeatureStats(activation_count, co, class_count, precision, recall, f1)


def filter_uninformative(stats: FeatureStats, total_samples: int | None = None,
                         lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Indices of features whose activation rate lies strictly inside ``(lo, hi)``.

    The defaults drop exactly the never-active and always-active features.
    """
    total = stats.total_samples if total_samples is None else total_samples
    if total <= 0:
        raise InputError("total_samples must be positive")
    if not 0.0 <= lo < hi <= 1.0:
        raise InputError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    counts = stats.activation_count
    keep = (counts > 0) & (counts < total) & (counts > lo * total) & (counts < hi * total)
    return np.flatnonzero(keep)


def select_experts(stats: FeatureStats, survivors, class_index: int, k: int,
                   source: dict | None = None) -> ExpertFeatureSet:
    """Top ``floor(5k/4)`` surviving features by F1 for one class.

    Only features with positive F1 qualify; ties go to the lower index.
    """
    want = expert_count(k)
    survivors = np.asarray(survivors, dtype=np.int64)
    scores = stats.f1[survivors, class_index]
    candidates = survivors[scores > 0]
    candidate_scores = stats.f1[candidates, class_index]
    if len(candidates) < want:
        raise SelectionError(
            f"class {class_index}: only {len(candidates)} surviving features have positive F1, need {want}",
            class_index,
        )
    order = np.lexsort((candidates, -candidate_scores))[:want]
    return ExpertFeatureSet(class_index, candidates[order], candidate_scores[order], dict(source or {}))
