"""Confusion-matrix segmentation metrics (IoU, F1, precision, recall)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

CSV_COLUMNS = ("class", "iou", "f1", "precision", "recall")


def predict(logits):
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-1)


def confusion(labels, predictions, num_classes):
    """``counts[truth, predicted]`` over all pixels."""
    labels = np.asarray(labels).reshape(-1)
    predictions = np.asarray(predictions).reshape(-1)
    if labels.shape != predictions.shape:
        raise InvalidInputError("labels and predictions differ in size")
    for name, ids in (("label", labels), ("prediction", predictions)):
        if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
            raise InvalidInputError(f"{name} id out of range [0, {num_classes})")
    flat = labels.astype(np.int64) * num_classes + predictions.astype(np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


@dataclass(frozen=True)
class ClassMetrics:
    iou: float
    f1: float
    precision: float
    recall: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple  # ClassMetrics, or None for a class absent from truth and prediction
    miou: float
    mf1: float
    mprec: float
    mrec: float

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c, m in enumerate(self.per_class):
            if m is None:
                writer.writerow([c, "", "", "", ""])
            else:
                writer.writerow([c, repr(m.iou), repr(m.f1), repr(m.precision), repr(m.recall)])
        writer.writerow(["mean", repr(self.miou), repr(self.mf1), repr(self.mprec), repr(self.mrec)])
        return buf.getvalue()


def _ratio(num, den):
    return num / den if den else 0.0


def report(matrix):
    counts = np.asarray(matrix, dtype=np.int64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    per_class = []
    for c in range(counts.shape[0]):
        t, p, n = int(tp[c]), int(fp[c]), int(fn[c])
        if t + p + n == 0:
            per_class.append(None)
            continue
        prec = _ratio(t, t + p)
        rec = _ratio(t, t + n)
        per_class.append(ClassMetrics(t / (t + p + n), _ratio(2 * prec * rec, prec + rec),
                                      prec, rec))
    present = [m for m in per_class if m is not None]
    if not present:
        nan = float("nan")
        return MetricsReport(tuple(per_class), nan, nan, nan, nan)
    k = len(present)
    return MetricsReport(
        tuple(per_class),
        sum(m.iou for m in present) / k,
        sum(m.f1 for m in present) / k,
        sum(m.precision for m in present) / k,
        sum(m.recall for m in present) / k,
    )


def evaluate(labels, logits, num_classes):
    return report(confusion(labels, predict(logits), num_classes))
