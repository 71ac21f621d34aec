"""Feature alignment between two SAEs via an exact assignment solver."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..sae import SaeModel, encode

COST_DECODER_COSINE = "decoder_cosine"
COST_ACTIVATION_CORRELATION = "activation_correlation"


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching on a square cost matrix.

    Shortest augmenting paths with row/column potentials, O(n^3). Returns
    ``assignment`` with ``assignment[i]`` the column matched to row ``i``,
    and the total cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InputError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise InputError("cost matrix must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0

    # 1-based columns; column 0 is a virtual start node
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # row_of[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            cols = np.flatnonzero(free)
            reduced = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = reduced < minv[cols]
            minv[cols[better]] = reduced[better]
            way[cols[better]] = j0
            # lowest column index wins ties, keeping the result deterministic
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.int64)
    assignment[row_of[1:] - 1] = np.arange(n)
    total = float(cost[np.arange(n), assignment].sum())
    return assignment, total


@dataclass
class FeatureMatching:
    """``permutation[j]`` is the unlearned-SAE index matched to original feature ``j``."""

    permutation: np.ndarray
    cost_kind: str
    total_cost: float
    cost_matrix_digest: str

    @classmethod
    def identity(cls, m: int, cost_kind: str = "identity") -> "FeatureMatching":
        return cls(np.arange(m), cost_kind, 0.0, "")

    def record(self) -> dict:
        return {
            "cost_kind": self.cost_kind,
            "total_cost": self.total_cost,
            "cost_matrix_digest": self.cost_matrix_digest,
            "fixed_points": int(np.sum(self.permutation == np.arange(len(self.permutation)))),
        }


def decoder_cosine_cost(sae_orig: SaeModel, sae_unl: SaeModel) -> np.ndarray:
    a = sae_orig.decoder / np.linalg.norm(sae_orig.decoder, axis=1, keepdims=True)
    b = sae_unl.decoder / np.linalg.norm(sae_unl.decoder, axis=1, keepdims=True)
    return 1.0 - a @ b.T


def activation_correlation_cost(sae_orig: SaeModel, sae_unl: SaeModel, acts_orig, acts_unl) -> np.ndarray:
    """``1 - Pearson`` correlation of feature activations on a shared probe batch.

    ``acts_orig`` and ``acts_unl`` are the two models' activations on the same
    inputs. Features that never fire get correlation 0 with everything.
    """
    co = encode(sae_orig, acts_orig)
    cu = encode(sae_unl, acts_unl)
    if co.shape[0] != cu.shape[0]:
        raise InputError("probe activations must come from the same inputs")
    co = co - co.mean(axis=0)
    cu = cu - cu.mean(axis=0)
    no = np.linalg.norm(co, axis=0)
    nu = np.linalg.norm(cu, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (co.T @ cu) / np.outer(no, nu)
    corr = np.nan_to_num(corr, nan=0.0, posinf=0.0, neginf=0.0)
    return 1.0 - corr


def match_features(sae_orig: SaeModel, sae_unl: SaeModel, probe=None,
                   cost: str = COST_DECODER_COSINE) -> FeatureMatching:
    """Align the unlearned SAE's features to the original's.

    ``probe`` is an ``(acts_orig, acts_unl)`` pair, required only for the
    activation-correlation cost.
    """
    if sae_orig.m != sae_unl.m or sae_orig.d != sae_unl.d:
        raise InputError(f"SAE shapes differ: m={sae_orig.m}/{sae_unl.m}, d={sae_orig.d}/{sae_unl.d}")
    if cost == COST_DECODER_COSINE:
        matrix = decoder_cosine_cost(sae_orig, sae_unl)
    elif cost == COST_ACTIVATION_CORRELATION:
        if probe is None:
            raise InputError("activation-correlation matching needs a probe batch")
        matrix = activation_correlation_cost(sae_orig, sae_unl, *probe)
    else:
        raise InputError(f"unknown matching cost {cost!r}")
    perm, total = hungarian(matrix)
    digest = hashlib.sha256(np.ascontiguousarray(matrix, dtype="<f8").tobytes()).hexdigest()
    return FeatureMatching(perm, cost, total, digest)
