"""Command-line entry point.

Relative output paths are placed under ``$UNLEARN_AUDIT_OUTPUT`` (default: the
working directory). Exit codes: 0 success, 2 configuration error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .container import file_digest
from .data import generate_synthetic, load_splits, save_splits, split_forget_retain
from .errors import AuditError, ConfigError
from .model import TrainConfig, capture, forward, load_checkpoint, per_class_accuracy, save_checkpoint, train_classifier
from .numerics import make_rng
from .pipeline import MANIFEST, Pipeline, audit_method, read_json, sae_config, write_json
from .render import FORMATS, render_report
from .sae import load_sae, save_sae, train_sae
from .unlearn import category_of, registered_methods, run as run_unlearning

OUTPUT_ENV = "UNLEARN_AUDIT_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("unlearn_audit")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "."))


def out_path(p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else output_root() / path


def in_path(p: str) -> Path:
    path = Path(p)
    if path.is_absolute() or path.exists():
        return path
    return output_root() / path


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _layers(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--layers expects comma-separated integers, got {text!r}") from None


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- subcommands -------------------------------------------------------------

def cmd_data_gen(args):
    cfg = _config(args)
    d = cfg.data
    train, test = generate_synthetic(d.num_classes, d.samples_per_class, d.d_in, d.class_separation,
                                     d.intra_noise, make_rng(cfg.seed, "data"))
    path = out_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_splits(train, test, path)
    _print({"path": str(path), "sha256": digest, "train": len(train), "test": len(test)})


def cmd_model_train(args):
    cfg = _config(args)
    train, test = load_splits(in_path(args.data))
    p = cfg.model
    tc = TrainConfig(p.epochs, p.lr, p.momentum, p.batch_size, p.l2)
    ckpt = train_classifier(train, tc, make_rng(cfg.seed, "model"), test, p.hidden_dim, p.num_hidden)
    ckpt.metadata["seed"] = cfg.seed
    path = out_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(ckpt, path)
    _print({"path": str(path), "sha256": digest, "train_accuracy": ckpt.metadata["train_accuracy"],
            "test_accuracy": ckpt.metadata["test_accuracy"]})


def cmd_model_eval(args):
    train, test = load_splits(in_path(args.data))
    ds = test if args.split == "test" else train
    m = load_checkpoint(in_path(args.model)).model
    logits = forward(m, ds.inputs)
    per_class = per_class_accuracy(logits, ds.labels, ds.num_classes)
    _print({"split": args.split, "accuracy": float((logits.argmax(1) == ds.labels).mean()),
            "per_class_accuracy": [float(a) for a in per_class]})


def _method_params(pairs) -> dict:
    hp = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        try:
            hp[key.strip()] = float(value) if any(ch in value for ch in ".eE") else int(value)
        except ValueError:
            raise ConfigError(f"--param {key}: {value!r} is not a number") from None
    return hp


def cmd_unlearn_run(args):
    cfg = _config(args)
    if args.method not in cfg.method_overrides:
        cfg.method_overrides[args.method] = {}
    cfg.method_overrides[args.method].update(_method_params(args.param))
    cfg.unlearn.forget_class = args.forget_class
    spec = cfg.method_spec(args.method)
    spec.resolved()
    train, test = load_splits(in_path(args.data))
    if not 0 <= args.forget_class < train.num_classes:
        raise ConfigError(f"--forget-class {args.forget_class} outside [0, {train.num_classes})")
    original = load_checkpoint(in_path(args.model))
    result = run_unlearning(spec, original, split_forget_retain(train, args.forget_class),
                            rng=make_rng(cfg.seed, "unlearn", args.method),
                            eval_split=split_forget_retain(test, args.forget_class))
    path = out_path(args.out or f"models/{args.method}.ckpt")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, path)
    rec = result.record()
    write_json(path.with_suffix(".json"), rec)
    _print(rec)


def cmd_sae_train(args):
    cfg = _config(args)
    train, _ = load_splits(in_path(args.data))
    model = load_checkpoint(in_path(args.model)).model
    sae = train_sae(capture(model, train.inputs, args.layer), sae_config(cfg, args.layer),
                    {"model": str(args.model), "layer": args.layer, "split": "train"})
    path = out_path(args.out or f"saes/{Path(args.model).stem}_L{args.layer}.sae")
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_sae(sae, path)
    _print({"path": str(path), "sha256": digest, "final_loss": sae.loss_history[-1]})


def _sae_paths(text: str | None, layers) -> dict | None:
    if text is None:
        return None
    paths = [s.strip() for s in text.split(",")]
    if len(paths) != len(layers):
        raise ConfigError(f"expected {len(layers)} SAE paths (one per layer), got {len(paths)}")
    return {layer: load_sae(in_path(p)) for layer, p in zip(layers, paths)}


def cmd_audit_run(args):
    cfg = _config(args)
    cfg.audit.layers = _layers(args.layers)
    cfg.audit.alpha = args.alpha
    cfg.unlearn.forget_class = args.forget_class
    if args.shared:
        cfg.sae.mode = "shared"
    cfg.validate()
    train, test = load_splits(in_path(args.data))
    original = load_checkpoint(in_path(args.original)).model
    unlearned = load_checkpoint(in_path(args.unlearned)).model

    def fit_saes(models, tag):
        out = {}
        for layer in cfg.audit.layers:
            log.info("training %s SAE at layer %d", tag, layer)
            acts = np.concatenate([capture(m, train.inputs, layer) for m in models])
            out[layer] = train_sae(acts, sae_config(cfg, layer), {"model": tag, "layer": layer})
        return out

    saes_unl = _sae_paths(args.sae_unlearned, cfg.audit.layers)
    if saes_unl is None:
        saes_unl = fit_saes([original, unlearned], "shared") if args.shared else fit_saes([unlearned], "unlearned")
    saes_orig = None
    if not args.shared:
        saes_orig = _sae_paths(args.sae_original, cfg.audit.layers) or fit_saes([original], "original")
    name = args.method or Path(args.unlearned).stem
    sidecar = in_path(args.unlearned).with_suffix(".json")
    result = read_json(sidecar) if sidecar.exists() else {}
    category = args.category or result.get("category") or (category_of(name) if name in registered_methods() else "")
    report = audit_method(cfg, original, unlearned, saes_orig, saes_unl, train, test, method=name,
                          category=category, failed_unlearning=bool(result.get("failed_unlearning", False)))
    doc = {
        "forget_class": cfg.unlearn.forget_class,
        "layers": list(cfg.audit.layers),
        "alpha": cfg.audit.alpha,
        "thresholds": report.thresholds.record(),
        "sae_mode": report.sae_mode,
        "matching_cost": report.matching_cost,
        "error_term": report.error_term,
        "eval_split": report.eval_split,
        "methods": [report.record()],
    }
    out_dir = out_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"audit_{name}.json").write_text(render_report(doc, "json"))
    (out_dir / f"audit_{name}.csv").write_text(render_report(doc, "csv"))
    print(render_report(doc, "markdown"), end="")


def cmd_pipeline_run(args):
    cfg = _config(args)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    cfg.output_dir = str(out_path(cfg.output_dir))
    manifest = Pipeline(cfg).run()
    _print({"output_dir": cfg.output_dir, "executed": len(manifest.executed), "skipped": len(manifest.skipped),
            "discrepancies": manifest.discrepancies})


def cmd_report_render(args):
    run_dir = in_path(args.run)
    doc = None
    manifest_path = run_dir / MANIFEST
    if manifest_path.exists():
        manifest = read_json(manifest_path)
        report = manifest.get("stages", {}).get("report")
        if report:
            rel = "report/report.json"
            path = run_dir / rel
            if file_digest(path) != report["outputs"][rel]:
                raise AuditError(f"{path} does not match the digest recorded in the manifest")
            doc = read_json(path)
    elif not run_dir.exists():
        raise ConfigError(f"run directory {run_dir} does not exist")
    text = render_report(doc, args.format)
    if args.out:
        path = out_path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    else:
        print(text, end="")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="unlearn-audit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    groups = parser.add_subparsers(dest="group", required=True)

    def group(name, help_text):
        sub = groups.add_parser(name, help=help_text).add_subparsers(dest="action", required=True)
        return lambda action, fn, h: _leaf(sub, action, fn, h, common)

    data = group("data", "synthetic dataset")
    p = data("gen", cmd_data_gen, "generate the train/test dataset")
    p.add_argument("--out", default="data/dataset.bin")

    model = group("model", "classifier training and evaluation")
    p = model("train", cmd_model_train, "train the original classifier")
    p.add_argument("--data", default="data/dataset.bin")
    p.add_argument("--out", default="models/original.ckpt")
    p = model("eval", cmd_model_eval, "accuracy of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="data/dataset.bin")
    p.add_argument("--split", choices=("train", "test"), default="test")

    unlearn = group("unlearn", "unlearning methods")
    p = unlearn("run", cmd_unlearn_run, "apply one unlearning method")
    p.add_argument("--model", default="models/original.ckpt")
    p.add_argument("--data", default="data/dataset.bin")
    p.add_argument("--method", required=True)
    p.add_argument("--forget-class", type=int, required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="hyperparameter override")
    p.add_argument("--out")

    sae = group("sae", "sparse autoencoders")
    p = sae("train", cmd_sae_train, "train a TopK SAE on one layer")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="data/dataset.bin")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out")

    audit = group("audit", "restoration audit")
    p = audit("run", cmd_audit_run, "audit one unlearned model against the original")
    p.add_argument("--original", required=True)
    p.add_argument("--unlearned", required=True)
    p.add_argument("--data", default="data/dataset.bin")
    p.add_argument("--layers", default="3,4,5")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--forget-class", type=int, required=True)
    p.add_argument("--sae-original", help="comma-separated SAE paths, one per layer (trained when omitted)")
    p.add_argument("--sae-unlearned", help="comma-separated SAE paths, one per layer (trained when omitted)")
    p.add_argument("--shared", action="store_true", help="one SAE for both models, identity matching")
    p.add_argument("--method", help="name used in the report (default: checkpoint stem)")
    p.add_argument("--category", default="")
    p.add_argument("--out-dir", default="audit")

    pipeline = group("pipeline", "end-to-end run")
    p = pipeline("run", cmd_pipeline_run, "run every stage, reusing cached results")
    p.add_argument("--output-dir")

    report = group("report", "report rendering")
    p = report("render", cmd_report_render, "render a finished run's report")
    p.add_argument("--run", default="runs/default", help="pipeline output directory")
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.add_argument("--out")
    return parser


def _leaf(sub, action, fn, help_text, common):
    p = sub.add_parser(action, help=help_text, parents=[common])
    p.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AuditError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
