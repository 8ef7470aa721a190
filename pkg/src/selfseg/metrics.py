"""Dice scores, summaries and ablation-table reports."""
import csv
import io
import json
from pathlib import Path

import numpy as np

from .volume import LabelMap

COLUMNS = ("method", "training_data", "tumor_dice_mean", "tumor_dice_std", "tumor_dice_median",
           "pancreas_dice_mean", "pancreas_dice_std", "n_cases")


def dice(pred, truth, class_id):
    """2|P & G| / (|P| + |G|) for one class; 1.0 when both are empty."""
    p = pred.array if isinstance(pred, LabelMap) else np.asarray(pred)
    g = truth.array if isinstance(truth, LabelMap) else np.asarray(truth)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if isinstance(truth, LabelMap) and not 0 <= class_id < len(truth.classes):
        raise ValueError(f"unknown class {class_id}")
    pm, gm = p == class_id, g == class_id
    sp, sg = int(pm.sum()), int(gm.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((pm & gm).sum()) / (sp + sg)


def summarize(values):
    """Mean, population std and median."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    return {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))}


def table_row(method, training_data, tumor_scores, pancreas_scores):
    t, p = summarize(tumor_scores), summarize(pancreas_scores)
    return {"method": method, "training_data": training_data,
            "tumor_dice_mean": t["mean"], "tumor_dice_std": t["std"], "tumor_dice_median": t["median"],
            "pancreas_dice_mean": p["mean"], "pancreas_dice_std": p["std"], "n_cases": len(tumor_scores)}


def render_markdown(table):
    lines = ["| Methods: CT phases | Training Data | Tumor Dice | Tumor median | Pancreas Dice |",
             "|---|---|---|---|---|"]
    for r in table:
        lines.append(f"| {r['method']} | {r['training_data']} | "
                     f"{r['tumor_dice_mean']:.4f} ± {r['tumor_dice_std']:.4f} | {r['tumor_dice_median']:.4f} | "
                     f"{r['pancreas_dice_mean']:.4f} ± {r['pancreas_dice_std']:.4f} |")
    return "\n".join(lines) + "\n"


def render_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in table:
        w.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.4f}" for c in COLUMNS])
    return buf.getvalue()


def render_json(table):
    return json.dumps([{c: r[c] for c in COLUMNS} for r in table], indent=1)


def emit_report(table, fmt, path=None):
    """Render ``table`` as json, markdown or csv; write it when ``path`` is given."""
    if not table:
        raise ValueError("empty table")
    renderers = {"json": render_json, "markdown": render_markdown, "md": render_markdown, "csv": render_csv}
    if fmt not in renderers:
        raise ValueError(f"unknown report format {fmt!r}")
    text = renderers[fmt](table)
    if path is not None:
        Path(path).write_text(text)
    return text


def read_json_report(path):
    return json.loads(Path(path).read_text())
