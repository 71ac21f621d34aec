"""Expert-feature selection, alignment, ablation and restoration."""

from .features import (
    ExpertFeatureSet,
    FeatureStats,
    compute_feature_stats,
    expert_count,
    filter_uninformative,
    select_experts,
)
from .matching import (
    COST_ACTIVATION_CORRELATION,
    COST_DECODER_COSINE,
    FeatureMatching,
    hungarian,
    match_features,
)
from .steering import (
    ERROR_DROP,
    ERROR_PRESERVE,
    AblationResult,
    RestorationRow,
    SteeringConfig,
    restore,
    restore_logits,
    steer_codes,
    validate_experts,
)
from .verdict import DELETION, INCONCLUSIVE, SUPPRESSION, AuditReport, VerdictThresholds, classify_verdict

__all__ = [
    "AblationResult",
    "AuditReport",
    "COST_ACTIVATION_CORRELATION",
    "COST_DECODER_COSINE",
    "DELETION",
    "ERROR_DROP",
    "ERROR_PRESERVE",
    "ExpertFeatureSet",
    "FeatureMatching",
    "FeatureStats",
    "INCONCLUSIVE",
    "RestorationRow",
    "SUPPRESSION",
    "SteeringConfig",
    "VerdictThresholds",
    "classify_verdict",
    "compute_feature_stats",
    "expert_count",
    "filter_uninformative",
    "hungarian",
    "match_features",
    "restore",
    "restore_logits",
    "select_experts",
    "steer_codes",
    "validate_experts",
]
