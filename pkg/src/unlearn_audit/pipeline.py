"""End-to-end audit pipeline with content-addressed stage caching.

Stages: data -> original model -> one unlearned model per method -> one SAE
per (model, layer) -> expert selection and ablation check on the original
model -> restoration audit per method -> report.

Each stage's cache key hashes its parameters together with the digests of the
artifacts it reads. A stage is skipped when the manifest holds the same key and
every output it recorded still exists with the recorded digest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (
    AuditReport,
    FeatureMatching,
    SteeringConfig,
    VerdictThresholds,
    compute_feature_stats,
    filter_uninformative,
    match_features,
    restore,
    select_experts,
    validate_experts,
)
from .audit.features import ExpertFeatureSet
from .config import PipelineConfig
from .container import canonical_json, file_digest
from .data import generate_synthetic, load_splits, save_splits, split_forget_retain
from .errors import StageError
from .model import TrainConfig, capture, load_checkpoint, save_checkpoint, train_classifier
from .numerics import make_rng
from .render import write_reports
from .sae import SaeConfig, encode, load_sae, save_sae, train_sae
from .unlearn import run as run_unlearning

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def sha256_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def config_digest(cfg: PipelineConfig) -> str:
    """Digest of everything that defines the experiment (the output location does not)."""
    rec = cfg.record()
    rec.pop("output_dir")
    return sha256_json(rec)


def write_json(path: Path, obj) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(obj, sort_keys=True, indent=2, allow_nan=True).encode() + b"\n"
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_json(path: Path):
    return json.loads(path.read_text())


@dataclass
class RunManifest:
    config_digest: str
    config: dict
    tool_version: str = __version__
    stages: dict = field(default_factory=dict)
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    discrepancies: list = field(default_factory=list)
    failure: dict | None = None
    started: str = ""
    finished: str = ""

    def record(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "config": self.config,
            "tool_version": self.tool_version,
            "stages": self.stages,
            "executed": self.executed,
            "skipped": self.skipped,
            "discrepancies": self.discrepancies,
            "failure": self.failure,
            "started": self.started,
            "finished": self.finished,
        }

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        rec = read_json(path)
        return cls(**rec)

    def artifacts(self) -> dict[str, str]:
        out = {}
        for stage in self.stages.values():
            out.update(stage["outputs"])
        return out


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.cfg = config.validate()
        self.root = Path(config.output_dir)
        previous = self.root / MANIFEST
        self.previous = RunManifest.load(previous) if previous.exists() else None
        self.manifest = RunManifest(config_digest(config), config.record())

    # -- stage machinery -------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _digest(self, rel: str) -> str:
        return file_digest(self.path(rel))

    def stage(self, name: str, params: dict, inputs: list[str], outputs: list[str], fn):
        """Run ``fn()`` unless a cached result with identical inputs exists."""
        key = sha256_json({
            "stage": name,
            "params": params,
            "inputs": {rel: self._digest(rel) for rel in inputs},
            "tool_version": __version__,
        })
        cached = self.previous.stages.get(name) if self.previous else None
        if cached and cached["key"] == key and self._outputs_intact(cached["outputs"]):
            self.manifest.stages[name] = cached
            self.manifest.skipped.append(name)
            return
        logger.info("running stage %s", name)
        start = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            self.manifest.failure = {"stage": name, "error": f"{type(exc).__name__}: {exc}"}
            self.write_manifest()
            raise StageError(name, exc) from exc
        self.manifest.stages[name] = {
            "key": key,
            "inputs": inputs,
            "outputs": {rel: self._digest(rel) for rel in outputs},
            "seconds": round(time.perf_counter() - start, 3),
            "completed": _now(),
        }
        self.manifest.executed.append(name)

    def _outputs_intact(self, outputs: dict) -> bool:
        for rel, digest in outputs.items():
            p = self.path(rel)
            if not p.exists() or file_digest(p) != digest:
                return False
        return True

    def write_manifest(self):
        self.manifest.finished = _now()
        write_json(self.path(MANIFEST), self.manifest.record())

    # -- artifact paths --------------------------------------------------

    DATA = "data/dataset.bin"
    ORIGINAL = "models/original.ckpt"
    EXPERTS = "audit/experts.json"
    REPORT_JSON = "report/report.json"

    @staticmethod
    def model_path(method: str) -> str:
        return f"models/{method}.ckpt"

    @staticmethod
    def result_path(method: str) -> str:
        return f"models/{method}.json"

    def sae_path(self, owner: str, layer: int) -> str:
        return f"saes/{owner}_L{layer}.sae"

    @staticmethod
    def audit_path(method: str) -> str:
        return f"audit/{method}.json"

    # -- stages -----------------------------------------------------------

    def run(self) -> RunManifest:
        self.manifest.started = _now()
        cfg = self.cfg
        self.root.mkdir(parents=True, exist_ok=True)
        self.stage("data", {"seed": cfg.seed, **vars(cfg.data)}, [], [self.DATA], self._make_data)
        self.stage("model/original", {"seed": cfg.seed, **vars(cfg.model)}, [self.DATA], [self.ORIGINAL],
                   self._train_original)
        for method in cfg.unlearn.methods:
            params = {"seed": cfg.seed, "forget_class": cfg.unlearn.forget_class,
                      "hyperparams": cfg.method_spec(method).resolved()}
            self.stage(f"unlearn/{method}", params, [self.DATA, self.ORIGINAL],
                       [self.model_path(method), self.result_path(method)],
                       lambda method=method: self._unlearn(method))
        sae_params = {"seed": cfg.seed, **vars(cfg.sae)}
        shared = cfg.sae.mode == "shared"
        for layer in cfg.audit.layers:
            if not shared:
                self.stage(f"sae/original/L{layer}", sae_params, [self.DATA, self.ORIGINAL],
                           [self.sae_path("original", layer)],
                           lambda layer=layer: self._train_sae("original", layer))
            for method in cfg.unlearn.methods:
                inputs = [self.DATA, self.ORIGINAL, self.model_path(method)] if shared else \
                    [self.DATA, self.model_path(method)]
                self.stage(f"sae/{method}/L{layer}", sae_params, inputs, [self.sae_path(method, layer)],
                           lambda method=method, layer=layer: self._train_sae(method, layer))
        audit_params = {"audit": vars(cfg.audit), "k": cfg.sae.k, "forget_class": cfg.unlearn.forget_class,
                        "sae_mode": cfg.sae.mode}
        if not shared:
            self.stage("audit/experts", audit_params,
                       [self.DATA, self.ORIGINAL] + [self.sae_path("original", layer) for layer in cfg.audit.layers],
                       [self.EXPERTS], self._select_experts)
        for method in cfg.unlearn.methods:
            inputs = [self.DATA, self.ORIGINAL, self.model_path(method), self.result_path(method)]
            inputs += [self.sae_path(method, layer) for layer in cfg.audit.layers]
            if not shared:
                inputs += [self.EXPERTS] + [self.sae_path("original", layer) for layer in cfg.audit.layers]
            self.stage(f"audit/{method}", audit_params, inputs, [self.audit_path(method)],
                       lambda method=method: self._audit(method))
        report_inputs = [self.audit_path(m) for m in cfg.unlearn.methods] + ([] if shared else [self.EXPERTS])
        report_outputs = [self.REPORT_JSON, "report/report.csv", "report/report.md"]
        self.stage("report", audit_params, report_inputs, report_outputs, self._report)
        self._check_retrain_persistence()
        self.write_manifest()
        return self.manifest

    def _data(self):
        if not hasattr(self, "_data_cache"):
            self._data_cache = load_splits(self.path(self.DATA))
        return self._data_cache

    def _make_data(self):
        d = self.cfg.data
        train, test = generate_synthetic(d.num_classes, d.samples_per_class, d.d_in, d.class_separation,
                                         d.intra_noise, make_rng(self.cfg.seed, "data"))
        save_splits(train, test, self.path(self.DATA))

    def _train_original(self):
        train, test = self._data()
        p = self.cfg.model
        tc = TrainConfig(p.epochs, p.lr, p.momentum, p.batch_size, p.l2)
        ckpt = train_classifier(train, tc, make_rng(self.cfg.seed, "model"), test, p.hidden_dim, p.num_hidden)
        ckpt.metadata["seed"] = self.cfg.seed
        save_checkpoint(ckpt, self.path(self.ORIGINAL))

    def _unlearn(self, method: str):
        train, test = self._data()
        c = self.cfg.unlearn.forget_class
        original = load_checkpoint(self.path(self.ORIGINAL))
        result = run_unlearning(self.cfg.method_spec(method), original, split_forget_retain(train, c),
                                rng=make_rng(self.cfg.seed, "unlearn", method),
                                eval_split=split_forget_retain(test, c))
        save_checkpoint(result.model, self.path(self.model_path(method)))
        rec = result.record()
        rec.pop("wall_time")  # timing lives in the manifest so artifacts stay byte-stable
        write_json(self.path(self.result_path(method)), rec)

    def _train_sae(self, owner: str, layer: int):
        train, _ = self._data()
        model = load_checkpoint(self.path(self.ORIGINAL if owner == "original" else self.model_path(owner))).model
        acts = capture(model, train.inputs, layer)
        trained_on = {"model": owner, "layer": layer, "split": "train"}
        if self.cfg.sae.mode == "shared":
            original = load_checkpoint(self.path(self.ORIGINAL)).model
            acts = np.concatenate([capture(original, train.inputs, layer), acts])
            trained_on["model"] = f"original+{owner}"
        sae = train_sae(acts, sae_config(self.cfg, layer), trained_on)
        save_sae(sae, self.path(self.sae_path(owner, layer)))

    def _select_experts(self):
        train, test = self._data()
        original = load_checkpoint(self.path(self.ORIGINAL)).model
        out = {"forget_class": self.cfg.unlearn.forget_class, "layers": {}}
        for layer in self.cfg.audit.layers:
            sae = load_sae(self.path(self.sae_path("original", layer)))
            experts = experts_for(self.cfg, original, sae, train, layer, {"model": "original", "layer": layer})
            ablation = validate_experts(original, sae, experts, test, layer)
            out["layers"][str(layer)] = {"experts": experts.record(), "ablation": ablation.record()}
        write_json(self.path(self.EXPERTS), out)

    def _audit(self, method: str):
        shared = self.cfg.sae.mode == "shared"
        layers = self.cfg.audit.layers
        experts = None
        if not shared:
            rec = read_json(self.path(self.EXPERTS))["layers"]
            experts = {layer: expert_set_from_record(rec[str(layer)]["experts"]) for layer in layers}
        result = read_json(self.path(self.result_path(method)))
        report = audit_method(
            self.cfg,
            load_checkpoint(self.path(self.ORIGINAL)).model,
            load_checkpoint(self.path(self.model_path(method))).model,
            None if shared else {layer: load_sae(self.path(self.sae_path("original", layer))) for layer in layers},
            {layer: load_sae(self.path(self.sae_path(method, layer))) for layer in layers},
            *self._data(),
            method=method,
            category=result["category"],
            failed_unlearning=result["failed_unlearning"],
            experts=experts,
        )
        rec = report.record()
        rec["unlearning"] = result
        write_json(self.path(self.audit_path(method)), rec)

    def _report(self):
        audits = [read_json(self.path(self.audit_path(m))) for m in self.cfg.unlearn.methods]
        experts = None if self.cfg.sae.mode == "shared" else read_json(self.path(self.EXPERTS))
        doc = build_report(self.cfg, audits, experts)
        write_reports(doc, self.path("report"))

    def _check_retrain_persistence(self):
        doc = read_json(self.path(self.REPORT_JSON))
        persistence = doc.get("retrain_persistence")
        if persistence and not persistence["exhibited"]:
            self.manifest.discrepancies.append({
                "criterion": "retrain persistence",
                "detail": (f"retrain restoration gain {persistence['max_gain_points']:.1f} points is below "
                           f"the {persistence['threshold_points']:.0f}-point gate; reported, not enforced"),
            })


def sae_config(cfg: PipelineConfig, layer: int) -> SaeConfig:
    p = cfg.sae
    return SaeConfig(d=cfg.model.hidden_dim, m=p.expansion * cfg.model.hidden_dim, k=p.k, epochs=p.epochs, lr=p.lr,
                     momentum=p.momentum, batch_size=p.batch_size,
                     seed=int(make_rng(cfg.seed, "sae", layer).integers(2**62)), resample_until=p.resample_until)


def expert_set_from_record(rec: dict) -> ExpertFeatureSet:
    return ExpertFeatureSet(rec["class"], np.array(rec["indices"], dtype=np.int64), np.array(rec["f1_scores"]),
                            rec["source"])


def experts_for(cfg: PipelineConfig, model, sae, train, layer: int, source: dict) -> ExpertFeatureSet:
    """Forget-class experts of ``sae`` scored on the training split."""
    a = cfg.audit
    code = encode(sae, capture(model, train.inputs, layer))
    stats = compute_feature_stats(code, train.labels, train.num_classes)
    survivors = filter_uninformative(stats, len(train), a.filter_lo, a.filter_hi)
    return select_experts(stats, survivors, cfg.unlearn.forget_class, cfg.sae.k, source)


def audit_method(cfg: PipelineConfig, original, unlearned, saes_orig: dict | None, saes_unl: dict, train, test,
                 method: str = "", category: str = "", failed_unlearning: bool = False,
                 experts: dict | None = None) -> AuditReport:
    """Restoration rows for every audit layer.

    ``saes_orig=None`` selects shared mode: the unlearned model's SAE serves
    both sides and features are matched by identity. Experts are selected on
    the original model unless given.
    """
    a = cfg.audit
    shared = saes_orig is None
    eval_ds = test if a.eval_split == "test" else train
    rows, train_rows, matchings = [], [], {}
    for layer in a.layers:
        sae_unl = saes_unl[layer]
        sae_orig = sae_unl if shared else saes_orig[layer]
        if experts is not None:
            ex = experts[layer]
        else:
            owner = f"original+{method}" if shared else "original"
            ex = experts_for(cfg, original, sae_orig, train, layer, {"model": owner, "layer": layer})
        if shared:
            matching = FeatureMatching.identity(sae_unl.m)
        else:
            probe = None
            if a.matching_cost == "activation_correlation":
                probe = (capture(original, train.inputs, layer), capture(unlearned, train.inputs, layer))
            matching = match_features(sae_orig, sae_unl, probe, a.matching_cost)
        steering = SteeringConfig(layer, ex, matching, a.alpha, a.error_term)
        rows.append(restore(original, unlearned, sae_orig, sae_unl, steering, eval_ds))
        train_rows.append(restore(original, unlearned, sae_orig, sae_unl, steering, train))
        matchings[str(layer)] = matching.record()
    return AuditReport(
        method=method,
        category=category,
        forget_class=cfg.unlearn.forget_class,
        rows=rows,
        thresholds=VerdictThresholds(a.high_threshold, a.low_threshold, a.unlearned_max),
        sae_mode="shared" if shared else "separate",
        matching_cost="identity" if shared else a.matching_cost,
        error_term=a.error_term,
        eval_split=a.eval_split,
        failed_unlearning=failed_unlearning,
        train_rows=train_rows,
        matchings=matchings,
    )


def build_report(cfg: PipelineConfig, audits: list[dict], experts: dict | None) -> dict:
    """Deterministic report document: no timings, no paths, no timestamps."""
    a = cfg.audit
    doc = {
        "config_digest": config_digest(cfg),
        "forget_class": cfg.unlearn.forget_class,
        "layers": list(a.layers),
        "alpha": a.alpha,
        "thresholds": {"high": a.high_threshold, "low": a.low_threshold, "unlearned_max": a.unlearned_max},
        "sae_mode": cfg.sae.mode,
        "matching_cost": "identity" if cfg.sae.mode == "shared" else a.matching_cost,
        "error_term": a.error_term,
        "eval_split": a.eval_split,
        "methods": audits,
        "ablation": None,
        "retrain_persistence": None,
    }
    if experts is not None:
        doc["ablation"] = {layer: v["ablation"] for layer, v in experts["layers"].items()}
    for rec in audits:
        if rec["method"] == "retrain":
            gain = 100.0 * max(row["delta"] for row in rec["layers"])
            doc["retrain_persistence"] = {
                "max_gain_points": gain,
                "threshold_points": a.retrain_gain_points,
                "exhibited": gain >= a.retrain_gain_points,
            }
    return doc


def run_pipeline(config: PipelineConfig) -> RunManifest:
    return Pipeline(config).run()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
