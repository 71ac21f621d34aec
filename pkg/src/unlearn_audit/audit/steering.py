"""Expert ablation and selective restoration through SAE codes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import Dataset
from ..errors import ConfigError, InputError
from ..model import CapturedActivation, LayeredClassifier, capture, forward, forward_from, per_class_accuracy
from ..sae import SaeModel, ablate, decode, encode
from .features import ExpertFeatureSet
from .matching import FeatureMatching

ERROR_DROP = "drop"
ERROR_PRESERVE = "preserve"


@dataclass
class SteeringConfig:
    layer: int
    expert_set: ExpertFeatureSet
    matching: FeatureMatching
    alpha: float = 10.0
    error_term: str = ERROR_DROP

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ConfigError("alpha must be finite")
        if self.error_term not in (ERROR_DROP, ERROR_PRESERVE):
            raise ConfigError(f"error_term must be 'drop' or 'preserve', got {self.error_term!r}")


def steer_codes(code_orig: np.ndarray, code_unl: np.ndarray, experts, permutation, alpha: float) -> np.ndarray:
    """Move the unlearned code toward the original at the matched expert slots.

    For each expert ``j`` with ``p = permutation[j]``:
    ``out[:, p] = code_unl[:, p] + alpha * (code_orig[:, j] - code_unl[:, p])``.
    Every other entry is copied from ``code_unl``.
    """
    experts = np.asarray(experts, dtype=np.int64)
    mapped = np.asarray(permutation, dtype=np.int64)[experts]
    out = np.array(code_unl, dtype=np.float64, copy=True)
    out[:, mapped] = code_unl[:, mapped] + alpha * (code_orig[:, experts] - code_unl[:, mapped])
    return out


def _check_sae_layer(sae: SaeModel, layer: int, role: str):
    trained_layer = sae.trained_on.get("layer")
    if trained_layer is not None and trained_layer != layer:
        raise ConfigError(f"{role} SAE was trained on layer {trained_layer}, steering targets layer {layer}")


def _reconstruct(sae: SaeModel, h: np.ndarray, code: np.ndarray, error_term: str) -> np.ndarray:
    out = decode(sae, code)
    if error_term == ERROR_PRESERVE:
        out = out + (h - decode(sae, encode(sae, h)))
    return out


@dataclass
class AblationResult:
    layer: int
    class_index: int
    forget_drop: float  # points, passthrough minus ablated accuracy on the expert class
    retain_drift: float  # points, largest absolute per-class change among the other classes
    passthrough_accuracy: list[float] = field(default_factory=list)
    ablated_accuracy: list[float] = field(default_factory=list)

    def record(self) -> dict:
        return asdict(self)


def validate_experts(model: LayeredClassifier, sae: SaeModel, experts: ExpertFeatureSet, eval_ds: Dataset,
                     layer: int) -> AblationResult:
    """Accuracy change from zeroing the expert features in the SAE passthrough."""
    _check_sae_layer(sae, layer, "ablation")
    h = capture(model, eval_ds.inputs, layer)
    code = encode(sae, h)
    base = forward_from(model, CapturedActivation(layer, decode(sae, code)))
    ablated = forward_from(model, CapturedActivation(layer, decode(sae, ablate(code, experts.indices))))
    k = eval_ds.num_classes
    acc_base = per_class_accuracy(base, eval_ds.labels, k)
    acc_abl = per_class_accuracy(ablated, eval_ds.labels, k)
    change = 100.0 * (acc_abl - acc_base)
    c = experts.class_index
    others = np.delete(change, c)
    others = others[~np.isnan(others)]
    return AblationResult(
        layer=layer,
        class_index=c,
        forget_drop=float(-change[c]),
        retain_drift=float(np.max(np.abs(others))) if others.size else 0.0,
        passthrough_accuracy=[float(a) for a in acc_base],
        ablated_accuracy=[float(a) for a in acc_abl],
    )


@dataclass
class RestorationRow:
    layer: int
    alpha: float
    unlearned_accuracy: float
    sae_passthrough_accuracy: float
    restored_accuracy: float
    retain_unlearned_accuracy: float
    retain_passthrough_accuracy: float
    retain_restored_accuracy: float
    num_forget: int
    num_retain: int

    @property
    def delta(self) -> float:
        return self.restored_accuracy - self.unlearned_accuracy

    @property
    def delta_vs_passthrough(self) -> float:
        return self.restored_accuracy - self.sae_passthrough_accuracy

    @property
    def retain_delta(self) -> float:
        return self.retain_restored_accuracy - self.retain_unlearned_accuracy

    def record(self) -> dict:
        out = asdict(self)
        out.update(delta=self.delta, delta_vs_passthrough=self.delta_vs_passthrough, retain_delta=self.retain_delta)
        return out


@dataclass
class RestorationTrace:
    """Intermediate arrays of one restoration run (for inspection and tests)."""

    code_orig: np.ndarray
    code_unl: np.ndarray
    code_steered: np.ndarray
    passthrough_logits: np.ndarray
    restored_logits: np.ndarray
    unlearned_logits: np.ndarray


def restore_logits(orig: LayeredClassifier, unl: LayeredClassifier, sae_orig: SaeModel, sae_unl: SaeModel,
                   steering: SteeringConfig, inputs: np.ndarray) -> RestorationTrace:
    layer = steering.layer
    _check_sae_layer(sae_orig, layer, "original")
    _check_sae_layer(sae_unl, layer, "unlearned")
    if len(steering.matching.permutation) != sae_unl.m:
        raise InputError("matching size does not match the SAE width")
    h_orig = capture(orig, inputs, layer)
    h_unl = capture(unl, inputs, layer)
    c_orig = encode(sae_orig, h_orig)
    c_unl = encode(sae_unl, h_unl)
    c_hat = steer_codes(c_orig, c_unl, steering.expert_set.indices, steering.matching.permutation, steering.alpha)
    passthrough = forward_from(unl, CapturedActivation(layer, _reconstruct(sae_unl, h_unl, c_unl, steering.error_term)))
    restored = forward_from(unl, CapturedActivation(layer, _reconstruct(sae_unl, h_unl, c_hat, steering.error_term)))
    return RestorationTrace(c_orig, c_unl, c_hat, passthrough, restored, forward(unl, inputs))


def restore(orig: LayeredClassifier, unl: LayeredClassifier, sae_orig: SaeModel, sae_unl: SaeModel,
            steering: SteeringConfig, eval_ds: Dataset) -> RestorationRow:
    """Forget-class accuracy of the unlearned model before and after steering.

    Retain-class accuracy under the same intervention is reported alongside.
    """
    c = steering.expert_set.class_index
    trace = restore_logits(orig, unl, sae_orig, sae_unl, steering, eval_ds.inputs)
    forget = eval_ds.labels == c
    if not forget.any():
        raise InputError(f"evaluation set has no samples of class {c}")

    def acc(logits, mask):
        if not mask.any():
            return float("nan")
        return float(np.mean(logits[mask].argmax(axis=1) == eval_ds.labels[mask]))

    return RestorationRow(
        layer=steering.layer,
        alpha=float(steering.alpha),
        unlearned_accuracy=acc(trace.unlearned_logits, forget),
        sae_passthrough_accuracy=acc(trace.passthrough_logits, forget),
        restored_accuracy=acc(trace.restored_logits, forget),
        retain_unlearned_accuracy=acc(trace.unlearned_logits, ~forget),
        retain_passthrough_accuracy=acc(trace.passthrough_logits, ~forget),
        retain_restored_accuracy=acc(trace.restored_logits, ~forget),
        num_forget=int(forget.sum()),
        num_retain=int((~forget).sum()),
    )
