"""Layered MLP classifier with activation capture and forward-from-layer.

Layer numbering: layer 0 is the input, layers 1..L are the post-ReLU outputs
of the hidden layers, and the head maps layer L to logits. Parameters are
stored as ``weights[i]`` of shape ``(fan_in, fan_out)`` and ``biases[i]``
for ``i = 0..L`` (index ``L`` is the head).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ConfigError, InputError, ShapeError, TrainingError
from .numerics import OptimizerState, matmul, matmul_nt, matmul_tn, relu, sgd_step, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class LayeredClassifier:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ShapeError("need at least one hidden layer plus a head")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} expects width {w.shape[0]}, previous layer gives {self.weights[i - 1].shape[1]}")
        widths = {w.shape[1] for w in self.weights[:-1]}
        if len(widths) != 1:
            raise ShapeError(f"hidden layers must share one width, got {sorted(widths)}")

    @property
    def num_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "LayeredClassifier":
        return LayeredClassifier([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_hidden": self.num_hidden,
            "num_classes": self.num_classes,
            "nonlinearity": "relu",
        }


@dataclass
class CapturedActivation:
    layer_index: int
    values: np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    l2: float = 1e-4

    def validate(self, allow_zero_epochs: bool = True):
        if self.epochs < 0 or (self.epochs == 0 and not allow_zero_epochs):
            raise ConfigError(f"invalid epochs={self.epochs}")
        if not self.lr > 0 or self.batch_size < 1 or self.l2 < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class Checkpoint:
    model: LayeredClassifier
    metadata: dict = field(default_factory=dict)


def init_layer(fan_in: int, fan_out: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """He-normal weights scaled by fan-in, zero bias."""
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    return w, np.zeros(fan_out)


def init_classifier(input_dim: int, num_classes: int, rng: np.random.Generator,
                    hidden_dim: int = 64, num_hidden: int = 6) -> LayeredClassifier:
    dims = [input_dim] + [hidden_dim] * num_hidden + [num_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w, b = init_layer(fan_in, fan_out, rng)
        weights.append(w)
        biases.append(b)
    return LayeredClassifier(weights, biases)


def _check_input(m: LayeredClassifier, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ShapeError(f"expected inputs with {m.input_dim} columns, got shape {x.shape}")
    return x


def _check_layer(m: LayeredClassifier, layer: int):
    if not 1 <= layer <= m.num_hidden:
        raise InputError(f"layer {layer} outside [1, {m.num_hidden}]")


def _run(m: LayeredClassifier, h: np.ndarray, start: int) -> list[np.ndarray]:
    """Activations of layers ``start+1 .. L`` followed by the logits."""
    outs = []
    for i in range(start, m.num_hidden + 1):
        z = matmul(h, m.weights[i]) + m.biases[i]
        h = z if i == m.num_hidden else relu(z)
        outs.append(h)
    return outs


def forward(m: LayeredClassifier, x: np.ndarray) -> np.ndarray:
    return _run(m, _check_input(m, x), 0)[-1]


def forward_capture(m: LayeredClassifier, x: np.ndarray, layer: int) -> tuple[CapturedActivation, np.ndarray]:
    _check_layer(m, layer)
    outs = _run(m, _check_input(m, x), 0)
    return CapturedActivation(layer, outs[layer - 1]), outs[-1]


def capture(m: LayeredClassifier, x: np.ndarray, layer: int) -> np.ndarray:
    """Layer-``layer`` activations only (skips the tail)."""
    _check_layer(m, layer)
    h = _check_input(m, x)
    for i in range(layer):
        h = relu(matmul(h, m.weights[i]) + m.biases[i])
    return h


def forward_from(m: LayeredClassifier, h: CapturedActivation) -> np.ndarray:
    _check_layer(m, h.layer_index)
    values = np.asarray(h.values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != m.hidden_dim:
        raise ShapeError(f"activation width {values.shape} does not match hidden width {m.hidden_dim}")
    return _run(m, values, h.layer_index)[-1]


def predict(m: LayeredClassifier, x: np.ndarray) -> np.ndarray:
    return forward(m, x).argmax(axis=1)


def accuracy(m: LayeredClassifier, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(m, x) == y))


def per_class_accuracy(logits: np.ndarray, y: np.ndarray, num_classes: int) -> np.ndarray:
    pred = logits.argmax(axis=1)
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = y == c
        if mask.any():
            out[c] = np.mean(pred[mask] == c)
    return out


def gradients(m: LayeredClassifier, x: np.ndarray, grad_fn) -> tuple[float, list[np.ndarray]]:
    """Backpropagate ``grad_fn(logits) -> (loss, dloss/dlogits)``.

    Returns the loss and gradients in :meth:`LayeredClassifier.params` order.
    """
    acts = [x] + _run(m, x, 0)
    loss, g = grad_fn(acts[-1])
    grads = [None] * (2 * (m.num_hidden + 1))
    for i in range(m.num_hidden, -1, -1):
        if i < m.num_hidden:
            g = g * (acts[i + 1] > 0)
        grads[2 * i] = matmul_tn(acts[i], g)
        grads[2 * i + 1] = g.sum(axis=0)
        if i:
            g = matmul_nt(g, m.weights[i])
    return loss, grads


def loss_and_grads(m: LayeredClassifier, x: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean cross-entropy (+ ``l2/2 * sum W^2`` on weights) and its gradients."""
    loss, grads = gradients(m, x, lambda logits: softmax_cross_entropy(logits, y))
    if l2:
        for i, w in enumerate(m.weights):
            loss += 0.5 * l2 * float(np.sum(w * w))
            grads[2 * i] = grads[2 * i] + l2 * w
    return loss, grads


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def trainable_mask(m: LayeredClassifier, trainable_layers: set[int] | None) -> list[bool]:
    """Per-parameter flags; layer indices follow ``weights`` (head = L)."""
    if trainable_layers is None:
        return [True] * len(m.params())
    return [i // 2 in trainable_layers for i in range(len(m.params()))]


def fit(m: LayeredClassifier, x: np.ndarray, y: np.ndarray, config: TrainConfig, rng: np.random.Generator,
        trainable_layers: set[int] | None = None, step_fn=None) -> list[float]:
    """Minibatch SGD in place. Returns the mean loss of every epoch.

    ``step_fn(model, xb, yb) -> (loss, grads)`` overrides the default
    cross-entropy objective.
    """
    if step_fn is None:
        step_fn = lambda model, xb, yb: loss_and_grads(model, xb, yb, config.l2)  # noqa: E731
    mask = trainable_mask(m, trainable_layers)
    opt = OptimizerState(config.lr, config.momentum)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for idx in minibatches(len(y), config.batch_size, rng):
            loss, grads = step_fn(m, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}",
                    {"epoch": epoch, "last_losses": losses[-5:], "lr": config.lr},
                )
            grads = [g if keep else None for g, keep in zip(grads, mask)]
            sgd_step(m.params(), grads, opt)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def train_classifier(train, config: TrainConfig, rng: np.random.Generator, test=None,
                     hidden_dim: int = 64, num_hidden: int = 6) -> Checkpoint:
    config.validate()
    m = init_classifier(train.input_dim, train.num_classes, rng, hidden_dim, num_hidden)
    history = fit(m, train.inputs, train.labels, config, rng)
    meta = {
        "epochs": config.epochs,
        "train_accuracy": accuracy(m, train.inputs, train.labels),
        "loss_history": history,
    }
    if test is not None:
        meta["test_accuracy"] = accuracy(m, test.inputs, test.labels)
    logger.info("trained classifier: %s", {k: v for k, v in meta.items() if k != "loss_history"})
    return Checkpoint(m, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    m = ckpt.model
    arrays = {}
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    meta = {"architecture": m.architecture(), "training": ckpt.metadata}
    return container.write(path, "checkpoint", meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    _, meta, arrays = container.read(path, "checkpoint")
    n = meta["architecture"]["num_hidden"] + 1
    m = LayeredClassifier([arrays[f"W{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)])
    return Checkpoint(m, meta["training"])
