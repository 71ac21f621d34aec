"""TopK sparse autoencoder on captured layer activations.

``encode(x) = topk(relu(x @ W_enc + b_enc), K)`` and
``decode(c) = c @ W_dec + b_dec``. Training minimises the mean squared
reconstruction error with the TopK mask treated as a constant in the backward
pass, keeps decoder rows at unit norm, and re-initialises features that stay
silent for a whole epoch.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import ConfigError, ShapeError, TrainingError
from .numerics import OptimizerState, make_rng, matmul, relu, sgd_step, topk_mask

logger = logging.getLogger(__name__)


@dataclass
class SaeConfig:
    d: int = 64
    m: int = 256
    k: int = 8
    epochs: int = 80
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    # dead-feature resampling stops after this fraction of the epochs
    resample_until: float = 0.5

    def validate(self):
        if not self.m > self.d:
            raise ConfigError(f"SAE must be overcomplete (m={self.m} <= d={self.d})")
        if not 1 <= self.k < self.m:
            raise ConfigError(f"need 1 <= K < m, got K={self.k}, m={self.m}")
        if self.epochs < 0 or not self.lr > 0 or self.batch_size < 1:
            raise ConfigError(f"invalid SAE training config {self}")


@dataclass
class SaeModel:
    encoder: np.ndarray  # (d, m)
    enc_bias: np.ndarray  # (m,)
    decoder: np.ndarray  # (m, d)
    dec_bias: np.ndarray  # (d,)
    config: SaeConfig
    trained_on: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.encoder.shape[0]

    @property
    def m(self) -> int:
        return self.encoder.shape[1]

    @property
    def k(self) -> int:
        return self.config.k

    def params(self) -> list[np.ndarray]:
        return [self.encoder, self.enc_bias, self.decoder, self.dec_bias]


def preactivation(sae: SaeModel, acts: np.ndarray) -> np.ndarray:
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[1] != sae.d:
        raise ShapeError(f"expected activations with {sae.d} columns, got shape {acts.shape}")
    return matmul(acts, sae.encoder) + sae.enc_bias


def encode(sae: SaeModel, acts: np.ndarray) -> np.ndarray:
    return topk_mask(relu(preactivation(sae, acts)), sae.k)


def decode(sae: SaeModel, code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64)
    if code.ndim != 2 or code.shape[1] != sae.m:
        raise ShapeError(f"expected codes with {sae.m} columns, got shape {code.shape}")
    return matmul(code, sae.decoder) + sae.dec_bias


def ablate(code: np.ndarray, features) -> np.ndarray:
    out = np.array(code, dtype=np.float64, copy=True)
    idx = np.asarray(list(features), dtype=np.int64)
    if idx.size:
        out[:, idx] = 0.0
    return out


def reconstruction_error(sae: SaeModel, acts: np.ndarray) -> float:
    """Mean squared error of ``decode(encode(acts))``."""
    diff = decode(sae, encode(sae, acts)) - acts
    return float(np.mean(diff * diff))


def relative_error(sae: SaeModel, acts: np.ndarray) -> float:
    """``||x - x_hat||_F / ||x - mean(x)||_F``."""
    diff = decode(sae, encode(sae, acts)) - acts
    centred = acts - acts.mean(axis=0)
    return float(np.linalg.norm(diff) / np.linalg.norm(centred))


def loss_and_grads(sae: SaeModel, x: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
    """MSE loss, straight-through gradients and the batch code.

    Gradients follow :meth:`SaeModel.params` order. This is the training hot
    path, so it uses BLAS products rather than the batch-independent
    :func:`matmul`; runs stay deterministic on a given machine.
    """
    code = topk_mask(relu(x @ sae.encoder + sae.enc_bias), sae.k)
    diff = code @ sae.decoder + sae.dec_bias - x
    loss = float(np.mean(diff * diff))
    g_out = 2.0 * diff / diff.size
    g_dec = code.T @ g_out
    g_dec_b = g_out.sum(axis=0)
    g_pre = (g_out @ sae.decoder.T) * (code > 0)
    g_enc = x.T @ g_pre
    g_enc_b = g_pre.sum(axis=0)
    return loss, [g_enc, g_enc_b, g_dec, g_dec_b], code


def normalize_decoder(sae: SaeModel):
    norms = np.linalg.norm(sae.decoder, axis=1, keepdims=True)
    sae.decoder /= np.where(norms > 0, norms, 1.0)


def init_sae(config: SaeConfig, acts: np.ndarray, rng: np.random.Generator) -> SaeModel:
    decoder = rng.standard_normal((config.m, config.d))
    sae = SaeModel(
        encoder=np.zeros((config.d, config.m)),
        enc_bias=np.zeros(config.m),
        decoder=decoder,
        dec_bias=acts.mean(axis=0),
        config=config,
    )
    normalize_decoder(sae)
    sae.encoder = sae.decoder.T.copy()
    return sae


def _resample_dead(sae: SaeModel, dead: np.ndarray, x: np.ndarray, opt: OptimizerState, rng):
    """Point each dead feature at the residual of a high-error input."""
    residual = x - decode(sae, encode(sae, x))
    err = np.einsum("ij,ij->i", residual, residual)
    pool = np.argsort(-err, kind="stable")[: max(4 * len(dead), len(dead))]
    picks = rng.choice(pool, size=len(dead), replace=len(pool) < len(dead))
    alive = np.setdiff1d(np.arange(sae.m), dead)
    enc_scale = np.linalg.norm(sae.encoder[:, alive], axis=0).mean() if alive.size else 1.0
    for j, i in zip(dead, picks):
        u = residual[i] / max(np.linalg.norm(residual[i]), 1e-12)
        sae.decoder[j] = u
        sae.encoder[:, j] = u * (0.2 * enc_scale)
        sae.enc_bias[j] = 0.0
    if opt.velocities:
        v_enc, v_enc_b, v_dec, _ = opt.velocities
        v_enc[:, dead] = 0.0
        v_enc_b[dead] = 0.0
        v_dec[dead] = 0.0


def train_sae(acts: np.ndarray, config: SaeConfig, trained_on: dict | None = None) -> SaeModel:
    config.validate()
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[1] != config.d:
        raise ShapeError(f"activations have shape {acts.shape}, config expects d={config.d}")
    if len(acts) < 10 * config.m:
        warnings.warn(f"only {len(acts)} activation rows for m={config.m} features (recommend >= {10 * config.m})",
                      stacklevel=2)
    rng = make_rng(config.seed, "sae")
    sae = init_sae(config, acts, rng)
    sae.trained_on = dict(trained_on or {})
    opt = OptimizerState(config.lr, config.momentum)
    resample_epochs = int(config.epochs * config.resample_until)
    for epoch in range(config.epochs):
        fired = np.zeros(config.m, dtype=bool)
        losses, sizes = [], []
        for start_idx in _batches(len(acts), config.batch_size, rng):
            xb = acts[start_idx]
            loss, grads, code = loss_and_grads(sae, xb)
            if not np.isfinite(loss):
                raise TrainingError(f"SAE loss became non-finite at epoch {epoch}",
                                    {"epoch": epoch, "lr": config.lr, "trained_on": sae.trained_on})
            sgd_step(sae.params(), grads, opt)
            normalize_decoder(sae)
            fired |= (code > 0).any(axis=0)
            losses.append(loss)
            sizes.append(len(start_idx))
        sae.loss_history.append(float(np.average(losses, weights=sizes)))
        dead = np.flatnonzero(~fired)
        if dead.size and epoch < resample_epochs:
            logger.debug("epoch %d: resampling %d dead features", epoch, dead.size)
            _resample_dead(sae, dead, acts, opt, rng)
    return sae


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def save_sae(sae: SaeModel, path) -> str:
    meta = {"config": asdict(sae.config), "trained_on": sae.trained_on, "loss_history": sae.loss_history}
    arrays = {"encoder": sae.encoder, "enc_bias": sae.enc_bias, "decoder": sae.decoder, "dec_bias": sae.dec_bias}
    return container.write(path, "sae", meta, arrays)


def load_sae(path) -> SaeModel:
    _, meta, a = container.read(path, "sae")
    return SaeModel(a["encoder"], a["enc_bias"], a["decoder"], a["dec_bias"], SaeConfig(**meta["config"]),
                    meta["trained_on"], meta["loss_history"])
