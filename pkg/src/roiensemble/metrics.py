"""Confusion matrices and macro-averaged accuracy / precision / recall / F1."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError


class ConfusionMatrix:
    """K x K counts; rows are true classes, columns are predicted classes."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise InvalidArgumentError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        cm = cls(num_classes)
        for t, p in zip(y_true, y_pred):
            cm.accumulate(t, p)
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label, predicted_label) -> "ConfusionMatrix":
        k = self.num_classes
        for v in (true_label, predicted_label):
            if int(v) != v or not 0 <= v < k:
                raise InvalidArgumentError(f"label {v!r} outside [0, {k})")
        self.counts[int(true_label), int(predicted_label)] += 1
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.counts:
            w.writerow([int(v) for v in row])
        return buf.getvalue()


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: tuple
    recall: tuple
    f1: tuple


def _ratio(num, den):
    return num / den if den else 0.0


def compute_report(cm: ConfusionMatrix) -> MetricReport:
    """Accuracy plus per-class and macro precision/recall/F1.

    An empty column (no predictions of a class) gives that class precision 0,
    an empty row gives recall 0, and F1 is 0 whenever precision + recall is 0.
    """
    total = cm.total
    if total == 0:
        raise InvalidArgumentError("confusion matrix is empty")
    c = cm.counts
    diag = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    precision, recall, f1 = [], [], []
    for j in range(cm.num_classes):
        p = _ratio(diag[j], col[j])
        r = _ratio(diag[j], row[j])
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(_ratio(2 * p * r, p + r)))
    k = cm.num_classes
    return MetricReport(
        accuracy=float(diag.sum() / total),
        macro_precision=sum(precision) / k,
        macro_recall=sum(recall) / k,
        macro_f1=sum(f1) / k,
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
    )


TABLE_COLUMNS = ("Model", "Accuracy", "Precision", "Recall", "F1 Score")


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def format_table(rows: Sequence[tuple]) -> str:
    """Fixed-width text table of (name, MetricReport) rows, values in percent."""
    cells = [list(TABLE_COLUMNS)]
    for name, r in rows:
        cells.append([name, _pct(r.accuracy), _pct(r.macro_precision), _pct(r.macro_recall), _pct(r.macro_f1)])
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for row in cells:
        first = row[0].ljust(widths[0])
        rest = [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join([first] + rest))
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "accuracy", "precision", "recall", "f1"])
    for name, r in rows:
        w.writerow([name] + [f"{v:.4f}" for v in (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1)])
    return buf.getvalue()


def read_report_csv(text: str) -> list:
    """Inverse of ``report_csv`` for the macro values (per-class lists are not stored)."""
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for rec in reader:
        vals = [float(rec[k]) for k in ("accuracy", "precision", "recall", "f1")]
        rows.append((rec["model"], MetricReport(*vals, (), (), ())))
    return rows
