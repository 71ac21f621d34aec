"""Method-by-layer restoration tables in csv, json and markdown."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

FORMATS = ("csv", "json", "markdown")
_EXT = {"csv": "csv", "json": "json", "markdown": "md"}


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _signed(x: float) -> str:
    return f"{100.0 * x:+.2f}"


def table(doc: dict | None) -> tuple[list[str], list[list[str]], list[list[bool]]]:
    """Header, rows of formatted cells, and the per-cell flag mask.

    Accuracies are percentages; restored cells carry the change versus the
    unlearned model in parentheses. A restored cell is flagged when it reaches
    the report's high threshold.
    """
    doc = doc or {}
    layers = list(doc.get("layers", []))
    header = ["method", "category"]
    for layer in layers:
        header += [f"L{layer} unlearned", f"L{layer} passthrough", f"L{layer} restored"]
    header += ["verdict", "failed unlearning"]
    high = doc.get("thresholds", {}).get("high", 0.5)
    rows, flags = [], []
    for rec in doc.get("methods", []):
        by_layer = {r["layer"]: r for r in rec["layers"]}
        cells, mask = [rec["method"], rec["category"]], [False, False]
        for layer in layers:
            r = by_layer[layer]
            cells += [_pct(r["unlearned_accuracy"]), _pct(r["sae_passthrough_accuracy"]),
                      f"{_pct(r['restored_accuracy'])} ({_signed(r['delta'])})"]
            mask += [False, False, r["restored_accuracy"] >= high]
        cells += [rec["verdict"], "yes" if rec["failed_unlearning"] else "no"]
        mask += [False, False]
        rows.append(cells)
        flags.append(mask)
    return header, rows, flags


def render_csv(doc: dict | None) -> str:
    header, rows, flags = table(doc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header + ["flagged layers"])
    for cells, mask in zip(rows, flags):
        flagged = [h.split()[0] for h, f in zip(header, mask) if f]
        w.writerow(cells + [" ".join(flagged)])
    return buf.getvalue()


def render_markdown(doc: dict | None) -> str:
    header, rows, flags = table(doc)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for cells, mask in zip(rows, flags):
        shown = [f"**{c}**" if f else c for c, f in zip(cells, mask)]
        lines.append("| " + " | ".join(shown) + " |")
    if doc:
        t = doc.get("thresholds", {})
        lines += [
            "",
            f"Forget class {doc.get('forget_class')}, alpha {doc.get('alpha')}, SAE mode {doc.get('sae_mode')}, "
            f"matching {doc.get('matching_cost')}, error term {doc.get('error_term')}, "
            f"evaluated on the {doc.get('eval_split')} split.",
            f"Bold cells: restored accuracy >= {_pct(t.get('high', 0.5))}%. Verdict thresholds: "
            f"high {t.get('high')}, low {t.get('low')}, unlearned max {t.get('unlearned_max')}.",
        ]
    return "\n".join(lines) + "\n"


def render_json(doc: dict | None) -> str:
    return json.dumps(doc or {"methods": []}, sort_keys=True, indent=2) + "\n"


def render_report(doc: dict | None, fmt: str = "markdown") -> str:
    if fmt == "csv":
        return render_csv(doc)
    if fmt == "json":
        return render_json(doc)
    if fmt in ("markdown", "md"):
        return render_markdown(doc)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def write_reports(doc: dict, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for fmt in FORMATS:
        p = out_dir / f"report.{_EXT[fmt]}"
        p.write_text(render_report(doc, fmt))
        paths[fmt] = p
    return paths
