"""Classification metrics: rank-based AUC, threshold metrics, ROC export.

Two aggregation protocols: the "average" block is the unweighted mean of
per-domain metrics (each domain gets its own operating threshold), the
"overall" block pools every record and applies one threshold. Thresholds
maximize Youden's J (TPR + TNR - 1); score >= threshold counts positive.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    domain_id: int
    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite score for sample {self.sample_id}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0/1, got {self.label}")


class MetricsError(ValueError):
    pass


def _scores_labels(records):
    s = np.array([r.score for r in records], dtype=np.float64)
    y = np.array([r.label for r in records], dtype=np.int64)
    return s, y


def auc(records) -> float:
    """Mann-Whitney rank estimator; ties contribute half a concordance."""
    s, y = _scores_labels(records)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC undefined: need both classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0     # midrank, 1-based
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_metrics(records, threshold: float):
    """(TPR, TNR, ACC) with score >= threshold counted positive."""
    if not records:
        raise MetricsError("no records")
    s, y = _scores_labels(records)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tpr = tp / (tp + fn) if tp + fn else float("nan")
    tnr = tn / (tn + fp) if tn + fp else float("nan")
    acc = (tp + tn) / len(y)
    return tpr, tnr, acc


def youden_threshold(records) -> float:
    """Score value maximizing TPR + TNR - 1; ties take the lowest score."""
    s, y = _scores_labels(records)
    if y.min() == y.max():
        raise MetricsError("threshold search needs both classes")
    candidates = np.unique(s)
    best_t, best_j = None, -np.inf
    for t in candidates:
        tpr, tnr, _ = threshold_metrics(records, float(t))
        j = tpr + tnr - 1.0
        if j > best_j + 1e-15:
            best_j, best_t = j, float(t)
    return best_t


def _block(records, threshold):
    tpr, tnr, acc = threshold_metrics(records, threshold)
    return {"auc": auc(records), "tpr": tpr, "tnr": tnr, "acc": acc,
            "threshold": threshold}


def evaluate(records, domains=None) -> dict:
    """Per-domain blocks plus 'average' and 'overall' aggregate blocks.

    Domains missing one of the classes are reported with null metrics and
    excluded from the average.
    """
    if domains is None:
        domains = sorted({r.domain_id for r in records})
    report = {}
    valid_blocks = []
    for d in domains:
        recs = [r for r in records if r.domain_id == d]
        labels = {r.label for r in recs}
        if labels == {0, 1}:
            block = _block(recs, youden_threshold(recs))
            valid_blocks.append(block)
        else:
            block = {"auc": None, "tpr": None, "tnr": None, "acc": None,
                     "threshold": None}
        report[str(d)] = block
    if not valid_blocks:
        raise MetricsError("no domain has both classes")
    report["average"] = {
        key: float(np.mean([b[key] for b in valid_blocks]))
        for key in ("auc", "tpr", "tnr", "acc", "threshold")}
    report["overall"] = _block(list(records), youden_threshold(records))
    return report


def roc_points(records):
    """(fpr, tpr, threshold) rows, threshold descending, with both anchors."""
    s, y = _scores_labels(records)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC needs both classes")
    points = [(0.0, 0.0, float("inf"))]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        tp = int(np.sum(pred & (y == 1)))
        fp = int(np.sum(pred & (y == 0)))
        points.append((fp / n_neg, tp / n_pos, float(t)))
    points.append((1.0, 1.0, float("-inf")))
    return points


def export_roc(records, out_path) -> None:
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, t in roc_points(records):
            writer.writerow([f"{fpr:.10g}", f"{tpr:.10g}", f"{t:.10g}"])


def roc_trapezoid_area(points) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> dict:
    return json.loads(text)
