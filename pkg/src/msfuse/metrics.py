"""Binary classification metrics and per-fold reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("auroc", "auprc", "sensitivity", "specificity", "f1", "accuracy")


class SingleClassError(ValueError):
    """Ranking metrics need at least one positive and one negative."""


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise SingleClassError("labels contain a single class; AUROC/AUPRC undefined")
    return scores, labels


def auroc(scores, labels):
    """Mann-Whitney pair count; ties count one half."""
    scores, labels = _split(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def auprc(scores, labels):
    """Step-wise area under the precision-recall curve (average precision)."""
    scores, labels = _split(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # Evaluate only at the last index of each tied score block.
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    precision = tp[last] / (last + 1)
    recall = tp[last] / labels.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def threshold_metrics(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    tn = int(np.sum(~pred & ~labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return {
        "sensitivity": tp / (tp + fn) if tp + fn else 0.0,
        "specificity": tn / (tn + fp) if tn + fp else 0.0,
        "f1": 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0,
        "accuracy": (tp + tn) / len(labels),
    }


def compute_metrics(scores, labels, threshold=0.5):
    row = {"auroc": auroc(scores, labels), "auprc": auprc(scores, labels)}
    row.update(threshold_metrics(scores, labels, threshold))
    return {k: row[k] for k in METRIC_NAMES}


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)    # one metrics dict per evaluated fold
    folds: list = field(default_factory=list)   # fold index of each row
    skipped: list = field(default_factory=list)

    def add(self, fold, row):
        self.folds.append(fold)
        self.rows.append(row)

    def values(self, name):
        return np.array([r[name] for r in self.rows])

    def mean(self):
        return {k: float(np.mean(self.values(k))) for k in METRIC_NAMES}

    def sd(self):
        n = len(self.rows)
        return {k: float(np.std(self.values(k), ddof=1)) if n > 1 else 0.0 for k in METRIC_NAMES}

    def cell(self, name):
        return f"{self.mean()[name]:.4f} ± {self.sd()[name]:.4f}"

    def summary_line(self):
        return "  ".join(f"{k}={self.cell(k)}" for k in METRIC_NAMES)

    def to_csv(self):
        if not self.rows:
            raise SingleClassError("no fold produced metrics")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", *METRIC_NAMES])
        for fold, row in zip(self.folds, self.rows):
            w.writerow([fold, *(repr(row[k]) for k in METRIC_NAMES)])
        mean, sd = self.mean(), self.sd()
        w.writerow(["mean", *(repr(mean[k]) for k in METRIC_NAMES)])
        w.writerow(["sd", *(repr(sd[k]) for k in METRIC_NAMES)])
        return buf.getvalue()


def summary_table_csv(label, reports):
    """``reports`` maps row label -> MetricsReport; one mean row per entry."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label, *METRIC_NAMES])
    for name, rep in reports.items():
        mean = rep.mean()
        w.writerow([name, *(repr(mean[k]) for k in METRIC_NAMES)])
    return buf.getvalue()
