"""Class-wise unlearning methods.

Every method takes the original checkpoint and a forget/retain split and
returns an :class:`UnlearnResult` holding a new checkpoint with the same
architecture. Methods are registered with a category: ``output-level`` for
loss or output-mapping manipulation, ``structural`` for methods that reset,
freeze-and-retrain or dampen specific layers' parameters.

Hyperparameter defaults live in ``unlearn_defaults.json``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .data import Dataset, ForgetRetainSplit
from .errors import ConfigError, InputError, ShapeError
from .model import (
    Checkpoint,
    LayeredClassifier,
    TrainConfig,
    fit,
    init_layer,
    loss_and_grads,
    minibatches,
    per_class_accuracy,
    forward,
)
from .numerics import OptimizerState, make_rng, sgd_step

OUTPUT_LEVEL = "output-level"
STRUCTURAL = "structural"

L1_ZERO_TOLERANCE = 1e-4


def load_defaults() -> dict:
    text = resources.files(__package__).joinpath("unlearn_defaults.json").read_text()
    return json.loads(text)


DEFAULTS = load_defaults()


@dataclass
class UnlearnMethodSpec:
    name: str
    hyperparams: dict = field(default_factory=dict)

    @property
    def category(self) -> str:
        return get_method(self.name).category

    def resolved(self) -> dict:
        """Defaults overlaid with the explicit hyperparameters, validated."""
        info = get_method(self.name)
        unknown = set(self.hyperparams) - set(info.defaults)
        if unknown:
            raise ConfigError(f"{self.name}: unknown hyperparameters {sorted(unknown)}")
        hp = {**info.defaults, **self.hyperparams}
        for key, value in hp.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value):
                raise ConfigError(f"{self.name}: hyperparameter {key}={value!r} must be a finite number")
        return hp


@dataclass
class UnlearnResult:
    model: Checkpoint
    forget_accuracy: float
    retain_accuracy: float
    wall_time: float
    method: str = ""
    category: str = ""
    hyperparams: dict = field(default_factory=dict)
    train_forget_accuracy: float = float("nan")
    train_retain_accuracy: float = float("nan")
    failed_unlearning: bool = False

    def record(self) -> dict:
        return {
            "method": self.method,
            "category": self.category,
            "hyperparams": self.hyperparams,
            "forget_accuracy": self.forget_accuracy,
            "retain_accuracy": self.retain_accuracy,
            "train_forget_accuracy": self.train_forget_accuracy,
            "train_retain_accuracy": self.train_retain_accuracy,
            "failed_unlearning": self.failed_unlearning,
            "wall_time": self.wall_time,
        }


@dataclass
class _MethodInfo:
    name: str
    category: str
    fn: object
    defaults: dict


_REGISTRY: dict[str, _MethodInfo] = {}


def get_method(name: str) -> _MethodInfo:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown unlearning method {name!r}; registered: {sorted(_REGISTRY)}") from None


def registered_methods() -> list[str]:
    return list(_REGISTRY)


def category_of(name: str) -> str:
    return get_method(name).category


def split_accuracies(m: LayeredClassifier, split: ForgetRetainSplit) -> tuple[float, float]:
    """(forget-class accuracy, mean per-class retain accuracy)."""
    forget = float(np.mean(forward(m, split.forget.inputs).argmax(axis=1) == split.forget_class))
    per_class = per_class_accuracy(forward(m, split.retain.inputs), split.retain.labels, split.retain.num_classes)
    per_class = np.delete(per_class, split.forget_class)
    return forget, float(np.nanmean(per_class))


def meets_output_contract(forget_accuracy: float, retain_accuracy: float, original_retain_accuracy: float,
                          max_forget: float = 0.10, max_retain_loss: float = 0.10) -> bool:
    return forget_accuracy <= max_forget and retain_accuracy >= original_retain_accuracy - max_retain_loss


def register(name: str, category: str):
    """Register ``core(model, split, hp, rng)`` as an unlearning method.

    ``core`` mutates a private copy of the original model. The returned public
    function has the signature ``(original, split, hyperparams=None, rng=None,
    eval_split=None) -> UnlearnResult``.
    """

    def wrap(core):
        def method(original: Checkpoint, split: ForgetRetainSplit, hyperparams: dict | None = None,
                   rng: np.random.Generator | None = None, eval_split: ForgetRetainSplit | None = None,
                   original_retain_accuracy: float | None = None) -> UnlearnResult:
            hp = UnlearnMethodSpec(name, dict(hyperparams or {})).resolved()
            rng = rng if rng is not None else make_rng(0, "unlearn", name)
            start = time.perf_counter()
            model = original.model.copy()
            core(model, split, hp, rng)
            wall = time.perf_counter() - start
            _check_same_architecture(original.model, model)
            evaluated = eval_split if eval_split is not None else split
            forget_acc, retain_acc = split_accuracies(model, evaluated)
            train_forget, train_retain = split_accuracies(model, split)
            if original_retain_accuracy is None:
                original_retain_accuracy = split_accuracies(original.model, evaluated)[1]
            meta = {
                **original.metadata,
                "unlearning": {"method": name, "category": category, "hyperparams": hp,
                               "forget_class": split.forget_class},
            }
            return UnlearnResult(
                model=Checkpoint(model, meta),
                forget_accuracy=forget_acc,
                retain_accuracy=retain_acc,
                wall_time=wall,
                method=name,
                category=category,
                hyperparams=hp,
                train_forget_accuracy=train_forget,
                train_retain_accuracy=train_retain,
                failed_unlearning=not meets_output_contract(forget_acc, retain_acc, original_retain_accuracy),
            )

        method.__name__ = core.__name__
        method.__doc__ = core.__doc__
        method.__wrapped__ = core
        _REGISTRY[name] = _MethodInfo(name, category, method, dict(DEFAULTS["methods"][name]))
        return method

    return wrap


def run(spec: UnlearnMethodSpec, original: Checkpoint, split: ForgetRetainSplit, rng=None, eval_split=None,
        original_retain_accuracy: float | None = None) -> UnlearnResult:
    return get_method(spec.name).fn(original, split, spec.hyperparams, rng, eval_split, original_retain_accuracy)


def _check_same_architecture(before: LayeredClassifier, after: LayeredClassifier):
    shapes_before = [p.shape for p in before.params()]
    shapes_after = [p.shape for p in after.params()]
    if shapes_before != shapes_after:
        raise ShapeError("unlearning changed the model architecture")


def _train_config(hp: dict) -> TrainConfig:
    cfg = TrainConfig(
        epochs=int(hp["epochs"]),
        lr=float(hp["lr"]),
        momentum=float(hp.get("momentum", 0.9)),
        batch_size=int(hp.get("batch_size", 64)),
        l2=float(hp.get("l2", 0.0)),
    )
    cfg.validate(allow_zero_epochs=False)
    return cfg


def _reset_layers(m: LayeredClassifier, layers, rng: np.random.Generator):
    for i in sorted(layers):
        m.weights[i], m.biases[i] = init_layer(*m.weights[i].shape, rng)


def _top_layers(m: LayeredClassifier, k_layers) -> set[int]:
    """Weight indices of the last ``k`` hidden layers plus the head."""
    k = int(k_layers)
    if k != k_layers or not 0 <= k <= m.num_hidden:
        raise ConfigError(f"k_layers must be an integer in [0, {m.num_hidden}], got {k_layers}")
    return set(range(m.num_hidden - k, m.num_hidden + 1))


@register("retrain", OUTPUT_LEVEL)
def retrain(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Reset the head, then train every layer on the retain set.

    Hidden layers start from the original weights, the analogue of retraining
    a pretrained backbone rather than training from scratch.
    """
    cfg = _train_config(hp)
    _reset_layers(m, [m.num_hidden], rng)
    fit(m, split.retain.inputs, split.retain.labels, cfg, rng)


@register("finetune", OUTPUT_LEVEL)
def finetune(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Keep training on the retain set only (relies on catastrophic forgetting)."""
    fit(m, split.retain.inputs, split.retain.labels, _train_config(hp), rng)


@register("random_label", OUTPUT_LEVEL)
def random_label(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Train on forget samples relabelled uniformly among the other classes, mixed with retain data."""
    cfg = _train_config(hp)
    others = np.array([c for c in range(split.forget.num_classes) if c != split.forget_class])
    fake = rng.choice(others, size=len(split.forget))
    x = np.concatenate([split.forget.inputs, split.retain.inputs])
    y = np.concatenate([fake, split.retain.labels])
    fit(m, x, y, cfg, rng)


@register("adv_neg_grad", OUTPUT_LEVEL)
def adv_neg_grad(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Per step: ascend the forget-batch loss and descend the retain-batch loss.

    The update is ``-descent_lr * g_retain + ascent_lr * g_forget``. The ascent
    term is dropped for batches whose forget loss already exceeds
    ``forget_loss_cap`` so the loss cannot run away.
    """
    epochs = int(hp["epochs"])
    if epochs < 1:
        raise ConfigError("adv_neg_grad needs epochs >= 1")
    fb = int(hp["forget_batch_size"])
    xf, xr, yr = split.forget.inputs, split.retain.inputs, split.retain.labels
    yf = np.full(fb, split.forget_class)
    opt = OptimizerState(1.0)
    for _ in range(epochs):
        forget_order = rng.permutation(len(xf))
        for step, idx in enumerate(minibatches(len(yr), int(hp["batch_size"]), rng)):
            start = (step * fb) % len(xf)
            fidx = forget_order[start:start + fb]
            forget_loss, g_forget = loss_and_grads(m, xf[fidx], yf[:len(fidx)])
            _, g_retain = loss_and_grads(m, xr[idx], yr[idx])
            ascent = hp["ascent_lr"] if forget_loss <= hp["forget_loss_cap"] else 0.0
            update = [hp["descent_lr"] * gr - ascent * gf for gr, gf in zip(g_retain, g_forget)]
            sgd_step(m.params(), update, opt)


@register("cf_k", STRUCTURAL)
def cf_k(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Freeze all but the last ``k_layers`` hidden layers (and head); train those on retain."""
    layers = _top_layers(m, hp["k_layers"])
    fit(m, split.retain.inputs, split.retain.labels, _train_config(hp), rng, trainable_layers=layers)


@register("eu_k", STRUCTURAL)
def eu_k(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Re-initialise the last ``k_layers`` hidden layers and the head, then train only those on retain."""
    cfg = _train_config(hp)
    layers = _top_layers(m, hp["k_layers"])
    _reset_layers(m, layers, rng)
    fit(m, split.retain.inputs, split.retain.labels, cfg, rng, trainable_layers=layers)


@register("l1_sparse", OUTPUT_LEVEL)
def l1_sparse(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Retain-set fine-tuning with an L1 penalty on all weights, then zero every |w| < 1e-4."""
    cfg = _train_config(hp)
    l1 = float(hp["l1_weight"])

    def step(model, xb, yb):
        loss, grads = loss_and_grads(model, xb, yb, cfg.l2)
        for i, w in enumerate(model.weights):
            loss += l1 * float(np.abs(w).sum())
            grads[2 * i] = grads[2 * i] + l1 * np.sign(w)
        return loss, grads

    fit(m, split.retain.inputs, split.retain.labels, cfg, rng, step_fn=step)
    for w in m.weights:
        w[np.abs(w) < L1_ZERO_TOLERANCE] = 0.0


def diagonal_fisher(m: LayeredClassifier, ds: Dataset, batch_size: int) -> list[np.ndarray]:
    """Mean squared mini-batch gradient of the cross-entropy, per parameter."""
    if len(ds) == 0:
        raise InputError("cannot estimate importance on an empty dataset")
    total = [np.zeros_like(p) for p in m.params()]
    batches = 0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        _, grads = loss_and_grads(m, ds.inputs[sl], ds.labels[sl])
        for acc, g in zip(total, grads):
            acc += g * g
        batches += 1
    return [acc / batches for acc in total]


@register("fisher_dampen", STRUCTURAL)
def fisher_dampen(m: LayeredClassifier, split: ForgetRetainSplit, hp: dict, rng):
    """Dampen parameters that matter far more for the forget set than the retain set.

    With ``r = I_forget / I_retain`` (diagonal Fisher) and threshold ``t``,
    every parameter with ``r > t`` is multiplied by ``lambda ** (1 - t / r)``.
    ``lambda = 1`` leaves the model untouched; ``lambda = 0`` zeroes every
    selected parameter. No gradient steps are taken.
    """
    lam = float(hp["dampening_constant"])
    threshold = float(hp["selection_ratio"])
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("dampening_constant must lie in [0, 1]")
    if not threshold > 0:
        raise ConfigError("selection_ratio must be positive")
    batch = int(hp["batch_size"])
    imp_forget = diagonal_fisher(m, split.forget, batch)
    imp_retain = diagonal_fisher(m, split.retain, batch)
    if lam == 1.0:
        return
    for p, i_f, i_r in zip(m.params(), imp_forget, imp_retain):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(i_r > 0, i_f / i_r, np.where(i_f > 0, np.inf, 0.0))
        selected = ratio > threshold
        if not selected.any():
            continue
        exponent = 1.0 - threshold / ratio[selected]
        p[selected] *= lam ** exponent if lam > 0 else 0.0
