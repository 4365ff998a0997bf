"""Merge evaluation and classification run outputs into one table."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

METRIC_FIELDS = ("fid_tinyconv", "fid_external", "ms_ssim_diversity")
CLASS_FIELDS = ("accuracy", "precision", "recall", "f1")
CSV_COLUMNS = ("experiment", "config") + METRIC_FIELDS + ("n_images", "n_pairs", "seed") + CLASS_FIELDS


def collect_runs(run_dirs):
    """Read ``metrics/metrics.json`` and ``reports/classification.json`` from
    each directory. Returns ``(rows, problems)``; rows keyed by
    ``(experiment, config)`` keep first-seen order, later runs overwrite
    earlier fields."""
    merged: dict = {}
    problems = []
    for d in map(Path, run_dirs):
        found = False
        metrics = d / "metrics" / "metrics.json"
        if metrics.exists():
            found = True
            try:
                data = json.loads(metrics.read_text())
                key = (str(data.get("experiment", d.name)), str(data.get("config", "") or ""))
                row = merged.setdefault(key, {"experiment": key[0], "config": key[1]})
                row.update({k: data[k] for k in METRIC_FIELDS + ("n_images", "n_pairs", "seed") if k in data})
            except (json.JSONDecodeError, AttributeError, TypeError) as exc:
                problems.append(f"{metrics}: corrupt ({exc})")
        classification = d / "reports" / "classification.json"
        if classification.exists():
            found = True
            try:
                data = json.loads(classification.read_text())
                label = str(data.get("experiment", d.name))
                for train_set, means in data["mean"].items():
                    row = merged.setdefault((train_set, label), {"experiment": train_set, "config": label})
                    row.update({k: float(means[k]) for k in CLASS_FIELDS})
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"{classification}: corrupt ({exc})")
        if not found:
            problems.append(f"{d}: no metrics or classification output")
    return list(merged.values()), problems


def _label(row):
    return f"{row['experiment']} {row['config']}".strip()


def render_text(rows) -> str:
    """Two blocks: FID / MS-SSIM rows then classification rows."""
    lines = []
    metric_rows = [r for r in rows if any(k in r for k in METRIC_FIELDS)]
    class_rows = [r for r in rows if any(k in r for k in CLASS_FIELDS)]
    if metric_rows:
        lines.append("Experiment  FID(tinyconv)  FID(external)  MS-SSIM")
        for r in metric_rows:
            cells = [f"{r[k]:.2f}" if k in r else "-" for k in METRIC_FIELDS]
            lines.append("  ".join([_label(r)] + cells))
    if class_rows:
        if lines:
            lines.append("")
        lines.append("Model  Accuracy Precision Recall F1")
        for r in class_rows:
            lines.append(f"{_label(r)}  " + " ".join(f"{r[k]:.4f}" for k in CLASS_FIELDS))
    return "\n".join(lines)


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
