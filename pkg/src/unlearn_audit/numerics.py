"""Dense linear algebra, losses, optimiser steps and seeding.

All arrays are float64. ``matmul`` deliberately avoids BLAS: ``np.einsum``
without path optimisation accumulates every output element over the inner
dimension in a fixed order, so a row's result does not depend on which batch
it was computed in. BLAS switches kernels with the batch shape and does not
give that guarantee.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(next_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *tags: str | int) -> int:
    """Derive an independent 64-bit seed for a named sub-stream.

    The same ``(seed, tags)`` always maps to the same value, on every platform.
    """
    state = seed & _MASK64
    state, out = splitmix64(state)
    for tag in tags:
        digest = hashlib.blake2b(str(tag).encode(), digest_size=8).digest()
        state ^= int.from_bytes(digest, "little")
        state, out = splitmix64(state)
    return out


def make_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """A PCG64 generator seeded from ``derive_seed(seed, *tags)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))


def as_matrix(a, name: str = "array") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a batch-independent summation order."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.einsum("ij,jk->ik", a, b)


def matmul_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` (used for weight gradients)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape}^T by {b.shape}")
    return np.einsum("ki,kj->ij", a, b)


def matmul_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` (used to backpropagate through a linear layer)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}^T")
    return np.einsum("ik,jk->ij", a, b)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class OptimizerState:
    """SGD (``momentum == 0``) or heavy-ball SGD state."""

    learning_rate: float
    momentum: float = 0.0
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")

    @property
    def kind(self) -> str:
        return "sgd-momentum" if self.momentum > 0 else "sgd"


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> list[np.ndarray]:
    """In-place update ``v <- mu*v + g; p <- p - lr*v``.

    Velocity buffers are created lazily on the first call. ``None`` gradients
    mark frozen parameters, which are left untouched.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.velocities:
        state.velocities = [np.zeros_like(p) for p in params]
    if len(state.velocities) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    for p, g, v in zip(params, grads, state.velocities):
        if g is None:
            continue
        if p.shape != g.shape or v.shape != p.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        if state.momentum > 0:
            v *= state.momentum
            v += g
            p -= state.learning_rate * v
        else:
            p -= state.learning_rate * g
    return params


def topk_mask(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of each row (or of a 1-D vector).

    Ties go to the lower index. Everything else is set to zero.
    """
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    x = v[None, :] if squeeze else v
    if x.ndim != 2:
        raise ShapeError(f"expected 1-D or 2-D input, got shape {v.shape}")
    width = x.shape[1]
    if k < 0 or k > width:
        raise InputError(f"k={k} outside [0, {width}]")
    out = np.where(topk_keep(x, k), x, 0.0)
    return out[0] if squeeze else out


def topk_keep(x: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the entries :func:`topk_mask` keeps (2-D input)."""
    if k == 0 or x.shape[0] == 0:
        return np.zeros(x.shape, dtype=bool)
    if k == x.shape[1]:
        return np.ones(x.shape, dtype=bool)
    kth = -np.partition(-x, k - 1, axis=1)[:, k - 1:k]
    above = x > kth
    tied = x == kth
    if (tied.sum(axis=1) == 1).all():
        return above | tied
    # fill the remaining slots with the lowest-index ties
    need = k - above.sum(axis=1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=1) <= need))


def check_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.isfinite(a).all()) for a in arrays)
