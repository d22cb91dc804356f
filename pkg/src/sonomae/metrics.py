"""Evaluation mathematics.

Binary confusion counts and their derived rates, support-weighted multi-class
metrics, tie-corrected rank-based ROC-AUC, ROC and precision-recall curve
points, one-vs-rest multi-class AUC, cross-fold aggregation, and CSV/JSON
report serialization.

Undefined ratios (zero denominators) are reported as 0 and the metric name is
listed under the ``degenerate`` key, so aggregation stays total and visible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ndgrad import ContractError, ShapeError


class DegenerateInputError(ValueError):
    """The score set cannot support the requested statistic."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts; the positive class is 'abnormal'."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ContractError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, labels, predictions) -> "ConfusionCounts":
        y = np.asarray(labels).astype(np.int64)
        p = np.asarray(predictions).astype(np.int64)
        if y.shape != p.shape:
            raise ShapeError(f"labels {y.shape} vs predictions {p.shape}")
        return cls(tp=int(((y == 1) & (p == 1)).sum()),
                   tn=int(((y == 0) & (p == 0)).sum()),
                   fp=int(((y == 0) & (p == 1)).sum()),
                   fn=int(((y == 1) & (p == 0)).sum()))


def _ratio(num: int, den: int, name: str, degenerate: list[str]) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def binary_metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, precision, recall, specificity and F1 from the counts."""
    degenerate: list[str] = []
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    accuracy = _ratio(tp + tn, counts.total, "accuracy", degenerate)
    precision = _ratio(tp, tp + fp, "precision", degenerate)
    recall = _ratio(tp, tp + fn, "recall", degenerate)
    specificity = _ratio(tn, tn + fp, "specificity", degenerate)
    if precision + recall == 0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "precision": precision, "recall": recall,
            "specificity": specificity, "f1": f1, "degenerate": tuple(degenerate)}


@dataclass(frozen=True)
class MultiConfusion:
    """K x K matrix with matrix[i][j] = count(true class i, predicted j)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            raise ShapeError(f"confusion matrix must be K x K with K >= 2, got {m.shape}")
        if (m < 0).any():
            raise ContractError("confusion matrix entries must be nonnegative")
        object.__setattr__(self, "matrix", m.astype(np.int64))

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def supports(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def weights(self) -> np.ndarray:
        n = self.supports
        return n / n.sum()

    @classmethod
    def from_predictions(cls, labels, predictions, k: int) -> "MultiConfusion":
        y = np.asarray(labels).astype(np.int64)
        p = np.asarray(predictions).astype(np.int64)
        m = np.zeros((k, k), dtype=np.int64)
        np.add.at(m, (y, p), 1)
        return cls(m)


def weighted_metrics(confusion: MultiConfusion) -> dict:
    """Support-weighted one-vs-rest precision, recall, F1 and specificity,
    plus plain accuracy (trace over total)."""
    m = confusion.matrix
    k = confusion.k
    n = int(m.sum())
    w = confusion.weights
    degenerate: list[str] = []
    per_class: dict[str, np.ndarray] = {key: np.zeros(k) for key in
                                        ("precision", "recall", "f1", "specificity")}
    for c in range(k):
        tp = int(m[c, c])
        fp = int(m[:, c].sum() - tp)
        fn = int(m[c, :].sum() - tp)
        tn = n - tp - fp - fn
        per_class["precision"][c] = _ratio(tp, tp + fp, f"precision[{c}]", degenerate)
        per_class["recall"][c] = _ratio(tp, tp + fn, f"recall[{c}]", degenerate)
        per_class["specificity"][c] = _ratio(tn, tn + fp, f"specificity[{c}]", degenerate)
        pr = per_class["precision"][c] + per_class["recall"][c]
        if pr == 0:
            degenerate.append(f"f1[{c}]")
        else:
            per_class["f1"][c] = 2 * per_class["precision"][c] * per_class["recall"][c] / pr
    accuracy = _ratio(int(np.trace(m)), n, "accuracy", degenerate)
    return {
        "accuracy": accuracy,
        "precision_weighted": float(w @ per_class["precision"]),
        "recall_weighted": float(w @ per_class["recall"]),
        "f1_weighted": float(w @ per_class["f1"]),
        "specificity_weighted": float(w @ per_class["specificity"]),
        "per_class": {key: val.copy() for key, val in per_class.items()},
        "weights": w,
        "degenerate": tuple(degenerate),
    }


# ---------------------------------------------------------------------------
# ranking statistics
# ---------------------------------------------------------------------------

def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank of their block."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Tie-corrected pairwise statistic computed via rank sums:
    (#(pos > neg) + 0.5 #(pos == neg)) / (P * N)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise DegenerateInputError("roc_auc needs at least one positive and one negative")
    ranks = _average_ranks(s)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def curve_points(scores, labels):
    """ROC points (threshold, fpr, tpr) and PR points (threshold, recall,
    precision) with one threshold per distinct score, descending. The ROC list
    is prefixed with the (inf, 0, 0) endpoint; the all-positive threshold
    supplies (1, 1). Precision at the highest threshold is kept as is, with no
    interpolation toward recall 0."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise DegenerateInputError("curves need at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp_cum = np.cumsum(y_sorted == 1)
    fp_cum = np.cumsum(y_sorted == 0)
    distinct = np.nonzero(np.diff(s_sorted, append=-np.inf))[0]
    roc = [(math.inf, 0.0, 0.0)]
    pr = []
    for i in distinct:
        tp = int(tp_cum[i])
        fp = int(fp_cum[i])
        thr = float(s_sorted[i])
        roc.append((thr, fp / neg, tp / pos))
        predicted = tp + fp
        pr.append((thr, tp / pos, tp / predicted if predicted else 0.0))
    return roc, pr


def trapezoid_area(points: Sequence[tuple[float, float, float]]) -> float:
    """Area under (x, y) pairs taken from (threshold, x, y) triples."""
    area = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def multiclass_auc(scores, labels, k: int | None = None) -> dict:
    """One-vs-rest AUC per class plus support-weighted and macro means."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    k = s.shape[1] if k is None else k
    counts = np.bincount(y, minlength=k)
    missing = [c for c in range(k) if counts[c] == 0]
    if missing:
        raise DegenerateInputError(f"classes absent from labels: {missing}")
    per_class = np.array([roc_auc(s[:, c], (y == c).astype(np.int64)) for c in range(k)])
    w = counts / counts.sum()
    return {"per_class": per_class, "weighted": float(w @ per_class),
            "macro": float(per_class.mean())}


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------

def aggregate_folds(fold_values: Mapping[str, Sequence[float]] | Sequence[Mapping[str, float]]
                    ) -> dict[str, dict]:
    """Mean and sample (n-1) standard deviation per metric across folds."""
    if not isinstance(fold_values, Mapping):
        keys = [k for k in fold_values[0] if isinstance(fold_values[0][k], (int, float))]
        fold_values = {k: [row[k] for row in fold_values] for k in keys}
    out = {}
    for name, values in fold_values.items():
        v = np.asarray(list(values), dtype=np.float64)
        if v.size < 2:
            raise ContractError(f"aggregate_folds needs >= 2 folds, got {v.size} for {name}")
        out[name] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)),
                     "n_folds": int(v.size)}
    return out


def write_fold_csv(path, rows: Sequence[tuple[int, int, str, str, float]]) -> None:
    """Rows of (repetition, fold, task, metric, value); 15 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["repetition", "fold", "task", "metric", "value"])
        for rep, fold, task, metric, value in rows:
            writer.writerow([rep, fold, task, metric, f"{value:.15g}"])


def read_fold_csv(path) -> list[tuple[int, int, str, str, float]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rep, fold, task, metric, value in reader:
            rows.append((int(rep), int(fold), task, metric, float(value)))
    return rows


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_roc_csv(path, roc_points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in roc_points:
            writer.writerow([f"{thr:.15g}", f"{fpr:.15g}", f"{tpr:.15g}"])


def write_pr_csv(path, pr_points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "recall", "precision"])
        for thr, recall, precision in pr_points:
            writer.writerow([f"{thr:.15g}", f"{recall:.15g}", f"{precision:.15g}"])
