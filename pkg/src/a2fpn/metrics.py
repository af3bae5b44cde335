"""Confusion-matrix accumulation, OA / mIoU / F1, and the CSV metric report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import DataError, DimensionError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise DimensionError(f"counts shape {self.counts.shape} != ({self.num_classes}, {self.num_classes})")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def per_class(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn


def predictions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis (axis 1); ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def confusion_update(
    cm: ConfusionMatrix,
    predictions,
    labels,
    ignore_label: Optional[int] = None,
) -> ConfusionMatrix:
    pred = np.asarray(predictions)
    gt = np.asarray(labels)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != label shape {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    k = cm.num_classes
    for name, arr in (("label", gt), ("prediction", pred)):
        bad = keep & ((arr < 0) | (arr >= k))
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"{name} value {int(arr[where])} outside [0, {k}) at index {where}")
    flat = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
    cm.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return cm


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of counted pixels on the diagonal: trace / total."""
    if cm.total == 0:
        raise UndefinedMetricError("overall accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def _present(cm: ConfusionMatrix) -> np.ndarray:
    tp, fp, fn = cm.per_class()
    return (tp + fp + fn) > 0


def iou_scores(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both ground truth and predictions."""
    tp, fp, fn = cm.per_class()
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def mean_iou(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("mIoU of an empty confusion matrix")
    present = _present(cm)
    if not present.any():
        raise UndefinedMetricError("mIoU undefined: every class is absent")
    return float(np.mean(iou_scores(cm)[present]))


def precision_recall(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray]:
    tp, fp, fn = cm.per_class()
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.where(tp + fp > 0, tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.where(tp + fn > 0, tp + fn, 1), 0.0)
    return precision, recall


def f1_scores(cm: ConfusionMatrix) -> Tuple[List[float], float]:
    """Per-class F1 (NaN for fully absent classes) and their mean over present classes.

    A class that occurs somewhere but has precision + recall = 0 scores 0.
    """
    if cm.total == 0:
        raise UndefinedMetricError("F1 of an empty confusion matrix")
    precision, recall = precision_recall(cm)
    present = _present(cm)
    s = precision + recall
    f1 = np.where(s > 0, 2 * precision * recall / np.where(s > 0, s, 1), 0.0)
    f1 = np.where(present, f1, np.nan)
    return [float(v) for v in f1], float(np.mean(f1[present]))


def metric_report(cm: ConfusionMatrix) -> dict:
    per_f1, mean_f1 = f1_scores(cm)
    precision, recall = precision_recall(cm)
    return {
        "precision": [float(p) for p in precision],
        "recall": [float(r) for r in recall],
        "f1": per_f1,
        "iou": [float(v) for v in iou_scores(cm)],
        "OA": overall_accuracy(cm),
        "mean_F1": mean_f1,
        "mIoU": mean_iou(cm),
    }


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.10f}"


def write_metric_csv(cm: ConfusionMatrix, path=None) -> str:
    """Render the report as CSV; one row per class plus OA, mean_F1 and mIoU rows.

    Columns: kind, name, precision, recall, f1, iou, value.  Returns the text and
    writes it to ``path`` when given.
    """
    rep = metric_report(cm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "name", "precision", "recall", "f1", "iou", "value"])
    for k in range(cm.num_classes):
        w.writerow(
            ["class", k, _fmt(rep["precision"][k]), _fmt(rep["recall"][k]), _fmt(rep["f1"][k]), _fmt(rep["iou"][k]), ""]
        )
    for key in ("OA", "mean_F1", "mIoU"):
        w.writerow(["summary", key, "", "", "", "", _fmt(rep[key])])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
