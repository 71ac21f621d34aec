"""Pipeline configuration: typed sections loaded from an INI file.

Every field has a default, so an empty file (or no file) gives the default
experiment. Method hyperparameters go in ``[method.<name>]`` sections and
override the versioned defaults shipped with the package.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .unlearn import registered_methods, UnlearnMethodSpec

CONFIG_VERSION = 1

ALL_METHODS = ("retrain", "finetune", "random_label", "adv_neg_grad", "cf_k", "eu_k", "l1_sparse", "fisher_dampen")


@dataclass
class DataParams:
    num_classes: int = 10
    samples_per_class: int = 500
    d_in: int = 32
    class_separation: float = 6.0
    intra_noise: float = 1.0


@dataclass
class ModelParams:
    hidden_dim: int = 64
    num_hidden: int = 6
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    l2: float = 1e-4


@dataclass
class UnlearnParams:
    forget_class: int = 2
    methods: tuple = ALL_METHODS


@dataclass
class SaeParams:
    expansion: int = 4
    k: int = 8
    epochs: int = 80
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 128
    resample_until: float = 0.5
    # "separate": one SAE per model and layer, aligned by assignment;
    # "shared": one SAE on pooled activations, identity alignment
    mode: str = "separate"


@dataclass
class AuditParams:
    layers: tuple = (3, 4, 5)
    alpha: float = 10.0
    high_threshold: float = 0.5
    low_threshold: float = 0.1
    unlearned_max: float = 0.1
    matching_cost: str = "decoder_cosine"
    error_term: str = "drop"
    eval_split: str = "test"
    filter_lo: float = 0.0
    filter_hi: float = 1.0
    # retrain persistence gate, in accuracy points
    retrain_gain_points: float = 40.0


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataParams = field(default_factory=DataParams)
    model: ModelParams = field(default_factory=ModelParams)
    unlearn: UnlearnParams = field(default_factory=UnlearnParams)
    sae: SaeParams = field(default_factory=SaeParams)
    audit: AuditParams = field(default_factory=AuditParams)
    method_overrides: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {CONFIG_VERSION})")
        known = set(registered_methods())
        for name in self.unlearn.methods:
            if name not in known:
                raise ConfigError(f"unknown unlearning method {name!r}")
        for name, hp in self.method_overrides.items():
            UnlearnMethodSpec(name, hp).resolved()
        if not 0 <= self.unlearn.forget_class < self.data.num_classes:
            raise ConfigError(f"forget_class {self.unlearn.forget_class} outside [0, {self.data.num_classes})")
        for layer in self.audit.layers:
            if not 1 <= layer <= self.model.num_hidden:
                raise ConfigError(f"audit layer {layer} outside [1, {self.model.num_hidden}]")
        if not self.audit.layers:
            raise ConfigError("at least one audit layer is required")
        if self.sae.mode not in ("separate", "shared"):
            raise ConfigError(f"sae.mode must be 'separate' or 'shared', got {self.sae.mode!r}")
        if self.audit.eval_split not in ("test", "train"):
            raise ConfigError("audit.eval_split must be 'test' or 'train'")
        if not self.sae.k < self.sae.expansion * self.model.hidden_dim:
            raise ConfigError("sae.k must be smaller than the number of SAE features")
        return self

    def method_spec(self, name: str) -> UnlearnMethodSpec:
        return UnlearnMethodSpec(name, dict(self.method_overrides.get(name, {})))

    def record(self) -> dict:
        """Fully materialised configuration (defaults included)."""
        out = dataclasses.asdict(self)
        out["unlearn"]["methods"] = list(self.unlearn.methods)
        out["audit"]["layers"] = list(self.audit.layers)
        out["resolved_method_hyperparams"] = {m: self.method_spec(m).resolved() for m in self.unlearn.methods}
        return out


_SECTIONS = {"data": DataParams, "model": ModelParams, "unlearn": UnlearnParams, "sae": SaeParams,
             "audit": AuditParams}


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}: {exc}") from None
    return raw


def _number(raw: str, where: str):
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{where}: {raw!r} is not a number") from None
    return int(value) if value.is_integer() and "." not in raw and "e" not in raw.lower() else value


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = PipelineConfig()
    for section in parser.sections():
        items = parser[section]
        if section == "pipeline":
            for key, raw in items.items():
                if key not in ("version", "seed", "output_dir"):
                    raise ConfigError(f"[pipeline]: unknown key {key!r}")
                setattr(cfg, key, _coerce(raw, getattr(cfg, key), f"[pipeline] {key}"))
        elif section in _SECTIONS:
            target = getattr(cfg, section)
            names = {f.name for f in dataclasses.fields(target)}
            for key, raw in items.items():
                if key not in names:
                    raise ConfigError(f"[{section}]: unknown key {key!r}")
                setattr(target, key, _coerce(raw, getattr(target, key), f"[{section}] {key}"))
        elif section.startswith("method."):
            name = section.split(".", 1)[1]
            cfg.method_overrides[name] = {k: _number(v, f"[{section}] {k}") for k, v in items.items()}
        else:
            raise ConfigError(f"unknown config section [{section}]")
    return cfg.validate()


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    """INI text that round-trips through :func:`parse_config`."""
    lines = ["[pipeline]", f"version = {cfg.version}", f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}", ""]
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    for name, hp in sorted(cfg.method_overrides.items()):
        lines.append(f"[method.{name}]")
        lines += [f"{k} = {v!r}" for k, v in hp.items()]
        lines.append("")
    return "\n".join(lines)
