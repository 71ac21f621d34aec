"""Acceptance criteria, one test per criterion.

Each test records (passed, detail) in ``conftest.ACCEPTANCE`` before asserting,
so the terminal summary shows one PASS/FAIL line per criterion.
"""

import json
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import brute_force_stats, exhaustive_assignment, stats_match, triple_loop
from unlearn_audit.audit import (
    ExpertFeatureSet,
    FeatureMatching,
    SteeringConfig,
    compute_feature_stats,
    expert_count,
    hungarian,
    match_features,
    restore_logits,
)
from unlearn_audit.data import generate_synthetic, load_splits
from unlearn_audit.model import TrainConfig, capture, init_classifier, load_checkpoint, train_classifier
from unlearn_audit.model import loss_and_grads as model_loss_and_grads
from unlearn_audit.numerics import make_rng, matmul, softmax_cross_entropy
from unlearn_audit.pipeline import MANIFEST, expert_set_from_record, sae_config
from unlearn_audit.render import FORMATS
from unlearn_audit.sae import SaeConfig, SaeModel, encode, init_sae, load_sae, reconstruction_error, train_sae
from unlearn_audit.sae import loss_and_grads as sae_loss_and_grads

SUPPRESSION_CANDIDATES = ("random_label", "adv_neg_grad", "finetune", "l1_sparse")


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    assert passed, detail


def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


def _fd(loss, params, eps=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss()
            p[idx] = old - eps
            down = loss()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def test_criterion_01_numerics_oracles():
    start = time.perf_counter()
    rng = make_rng(1, "acceptance", 1)
    mm_err = 0.0
    for _ in range(20):
        n, k, m = (int(v) for v in rng.integers(1, 12, size=3))
        a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
        mm_err = max(mm_err, float(np.max(np.abs(matmul(a, b) - triple_loop(a, b)))))

    grad_err = 0.0
    logits, labels = rng.standard_normal((6, 5)), rng.integers(0, 5, size=6)
    _, g = softmax_cross_entropy(logits, labels)
    grad_err = max(grad_err, _rel_err(g, _fd(lambda: softmax_cross_entropy(logits, labels)[0], [logits])[0]))

    clf = init_classifier(4, 3, rng, hidden_dim=6, num_hidden=2)
    for bias in clf.biases[:-1]:
        bias += 0.3
    x, y = rng.standard_normal((8, 4)), rng.integers(0, 3, size=8)
    _, grads = model_loss_and_grads(clf, x, y, 0.01)
    for a, b in zip(grads, _fd(lambda: model_loss_and_grads(clf, x, y, 0.01)[0], clf.params())):
        grad_err = max(grad_err, _rel_err(a, b))

    xs = rng.standard_normal((6, 5))
    sae = init_sae(SaeConfig(d=5, m=12, k=3), xs, rng)
    sae.encoder += 0.3 * rng.standard_normal(sae.encoder.shape)
    _, grads, _ = sae_loss_and_grads(sae, xs)
    # straight-through gradient: compare against the loss with the TopK support held fixed
    support = encode(sae, xs) > 0

    def fixed_support_loss():
        pre = xs @ sae.encoder + sae.enc_bias
        code = np.where(support, np.maximum(pre, 0.0), 0.0)
        err = code @ sae.decoder + sae.dec_bias - xs
        return float(np.mean(err * err))

    assert np.isclose(fixed_support_loss(), sae_loss_and_grads(sae, xs)[0])
    for a, b in zip(grads, _fd(fixed_support_loss, sae.params())):
        grad_err = max(grad_err, _rel_err(a, b))

    seconds = time.perf_counter() - start
    record(1, mm_err <= 1e-12 and grad_err <= 1e-4 and seconds < 10,
           f"matmul max err {mm_err:.1e}, worst gradient rel err {grad_err:.1e}, {seconds:.1f}s")


def test_criterion_02_sae_invariants():
    start = time.perf_counter()
    train, test = generate_synthetic(samples_per_class=1000, rng=make_rng(2, "acceptance", "data"))
    model = train_classifier(train, TrainConfig(), make_rng(2, "acceptance", "model"), test)
    inputs = np.concatenate([train.inputs, test.inputs])
    acts = capture(model.model, inputs, 3)
    cfg = SaeConfig(d=64, m=256, k=8, epochs=80, lr=0.005, seed=2)
    sae = train_sae(acts, cfg, {"layer": 3})
    code = encode(sae, acts)
    nnz = int((code > 0).sum(axis=1).max())
    negatives = int((code < 0).sum())
    norm_err = float(np.max(np.abs(np.linalg.norm(sae.decoder, axis=1) - 1.0)))
    initial = reconstruction_error(init_sae(cfg, acts, make_rng(cfg.seed, "sae")), acts)
    final = reconstruction_error(sae, acts)
    seconds = time.perf_counter() - start
    passed = (len(acts) == 10_000 and nnz <= cfg.k and negatives == 0 and norm_err <= 1e-9
              and final < initial / 5 and seconds < 120)
    record(2, passed, f"{len(acts)} rows, max nonzeros {nnz}, negatives {negatives}, "
                      f"norm err {norm_err:.1e}, error {final:.3f} vs initial {initial:.3f}, {seconds:.0f}s")


def test_criterion_03_expert_count():
    got = {k: expert_count(k) for k in (16, 32)}
    record(3, got == {16: 20, 32: 40}, f"K=16 -> {got[16]}, K=32 -> {got[32]}")


def test_criterion_04_feature_stats_oracle():
    start = time.perf_counter()
    rng = make_rng(4, "acceptance")
    agree = 0
    for _ in range(100):
        n, m, k = int(rng.integers(1, 1001)), int(rng.integers(1, 65)), int(rng.integers(2, 11))
        code = np.where(rng.random((n, m)) < rng.uniform(0.01, 0.6), rng.random((n, m)), 0.0)
        labels = rng.integers(0, k, size=n)
        stats = compute_feature_stats(code, labels, k)
        agree += stats_match(stats, brute_force_stats(code.tolist(), labels.tolist(), k))
    seconds = time.perf_counter() - start
    record(4, agree == 100 and seconds < 30, f"{agree}/100 instances equal the counting oracle, {seconds:.1f}s")


def _random_sae(rng, m, d, k=8):
    dec = rng.standard_normal((m, d))
    dec /= np.linalg.norm(dec, axis=1, keepdims=True)
    return SaeModel(dec.T.copy(), np.zeros(m), dec, np.zeros(d), SaeConfig(d=d, m=m, k=k))


def test_criterion_05_hungarian():
    start = time.perf_counter()
    rng = make_rng(5, "acceptance")
    recovered = 0
    for _ in range(50):
        sae = _random_sae(rng, 256, 64)
        perm = rng.permutation(256)
        inv = np.argsort(perm)
        # feature perm[j] of the shuffled copy is feature j of the original
        shuffled = SaeModel(sae.encoder[:, inv].copy(), sae.enc_bias[inv].copy(), sae.decoder[inv].copy(),
                            sae.dec_bias.copy(), sae.config)
        recovered += match_features(sae, shuffled).permutation.tolist() == perm.tolist()
    optimal = 0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        cost = rng.standard_normal((n, n)) * rng.choice([0.01, 1.0, 100.0])
        if rng.random() < 0.3:
            cost = np.round(cost)  # ties
        _, total = hungarian(cost)
        _, best = exhaustive_assignment(cost)
        optimal += bool(np.isclose(total, best, rtol=1e-12, atol=1e-9))
    seconds = time.perf_counter() - start
    record(5, recovered == 50 and optimal == 200 and seconds < 60,
           f"planted permutation recovered {recovered}/50 at m=256, exhaustive agreement {optimal}/200, "
           f"{seconds:.1f}s")


def test_criterion_06_expert_ablation(default_run):
    ablation = default_run["report"]["ablation"]
    stage_seconds = default_run["manifest"].stages["audit/experts"]["seconds"]
    parts, passed = [], True
    for layer, res in sorted(ablation.items()):
        ok = res["forget_drop"] >= 50 and res["retain_drift"] <= 5
        passed &= ok
        parts.append(f"L{layer} drop {res['forget_drop']:.0f} drift {res['retain_drift']:.0f}")
    passed &= stage_seconds < 60
    record(6, passed, ", ".join(parts) + f" (points), selection+ablation {stage_seconds:.1f}s")


def test_criterion_07_steering_identities(default_run):
    root, cfg = default_run["root"], default_run["config"]
    _, test = load_splits(root / "data" / "dataset.bin")
    orig = load_checkpoint(root / "models" / "original.ckpt").model
    unl = load_checkpoint(root / "models" / "adv_neg_grad.ckpt").model
    experts_doc = json.loads((root / "audit" / "experts.json").read_text())
    results = []
    for layer in cfg.audit.layers:
        sae_o = load_sae(root / "saes" / f"original_L{layer}.sae")
        sae_u = load_sae(root / "saes" / f"adv_neg_grad_L{layer}.sae")
        experts = expert_set_from_record(experts_doc["layers"][str(layer)]["experts"])
        matching = match_features(sae_o, sae_u)
        zero = restore_logits(orig, unl, sae_o, sae_u, SteeringConfig(layer, experts, matching, 0.0), test.inputs)
        full = restore_logits(orig, unl, sae_o, sae_u, SteeringConfig(layer, experts, matching, cfg.audit.alpha),
                              test.inputs)
        others = np.setdiff1d(np.arange(sae_u.m), matching.permutation[experts.indices])
        everything = ExpertFeatureSet(experts.class_index, np.arange(sae_o.m), np.zeros(sae_o.m))
        same = restore_logits(orig, orig, sae_o, sae_o,
                              SteeringConfig(layer, everything, FeatureMatching.identity(sae_o.m), 1.0), test.inputs)
        results.append((
            np.array_equal(zero.restored_logits, zero.passthrough_logits),
            np.array_equal(full.code_steered[:, others], full.code_unl[:, others]),
            np.array_equal(same.restored_logits, same.passthrough_logits),
        ))
    ok = [all(r[i] for r in results) for i in range(3)]
    record(7, all(ok), f"alpha=0 bitwise passthrough {ok[0]}, non-experts untouched {ok[1]}, "
                       f"identical models full steer {ok[2]} (layers {list(cfg.audit.layers)}, adv_neg_grad)")


def _restored_by_layer(doc, method):
    rec = next(m for m in doc["methods"] if m["method"] == method)
    return {r["layer"]: r for r in rec["layers"]}


def test_criterion_08_suppression_vs_deletion(default_run):
    doc = default_run["report"]
    best, best_val = None, -1.0
    for method in SUPPRESSION_CANDIDATES:
        for layer, r in _restored_by_layer(doc, method).items():
            if r["unlearned_accuracy"] <= 0.10 and r["restored_accuracy"] > best_val:
                best, best_val = (method, layer), r["restored_accuracy"]
    eu_k = max(r["restored_accuracy"] for r in _restored_by_layer(doc, "eu_k").values())
    gap = 100 * (best_val - eu_k)
    seconds = default_run["seconds"]
    passed = best_val >= 0.60 and eu_k <= 0.10 and gap >= 30 and seconds <= 600
    record(8, passed, f"best suppression {best[0]} L{best[1]} restored {100 * best_val:.0f}%, "
                      f"eu_k max restored {100 * eu_k:.0f}%, gap {gap:.0f} points, cold pipeline {seconds:.0f}s")


def test_criterion_09_retrain_persistence(default_run):
    doc, manifest = default_run["report"], default_run["manifest"]
    rows = _restored_by_layer(doc, "retrain").values()
    gain = max(100 * (r["restored_accuracy"] - r["unlearned_accuracy"]) for r in rows)
    field = doc["retrain_persistence"]
    flagged = any(d["criterion"] == "retrain persistence" for d in manifest.discrepancies)
    if gain >= 40:
        record(9, field["exhibited"] and not flagged, f"retrain restored {gain:.0f} points above unlearned")
    else:
        # below the gate the criterion downgrades to a report field plus a manifest discrepancy
        record(9, field["max_gain_points"] == pytest.approx(gain) and not field["exhibited"] and flagged,
               f"downgraded: retrain gain {gain:.0f} points < 40, reported in retrain_persistence "
               f"and recorded as a manifest discrepancy")


def test_criterion_10_reproducible_reports(default_run, second_default_run):
    a, b = default_run["root"], second_default_run["root"]
    names = {"csv": "report.csv", "json": "report.json", "markdown": "report.md"}
    same = {fmt: (a / "report" / names[fmt]).read_bytes() == (b / "report" / names[fmt]).read_bytes()
            for fmt in FORMATS}
    ma = json.loads((a / MANIFEST).read_text())
    mb = json.loads((b / MANIFEST).read_text())
    artifacts_equal = all(ma["stages"][s]["outputs"] == mb["stages"][s]["outputs"] for s in ma["stages"])
    record(10, all(same.values()) and artifacts_equal,
           f"report bytes equal per format {same}, every stage output digest equal {artifacts_equal}")


def test_sae_config_is_derived_from_the_run_seed(default_run):
    # every SAE in the run is trained with the seed the pipeline derives for its layer
    cfg, root = default_run["config"], default_run["root"]
    for layer in cfg.audit.layers:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert load_sae(root / "saes" / f"original_L{layer}.sae").config.seed == sae_config(cfg, layer).seed
