"""Confusion-matrix segmentation metrics (overall/mean accuracy, IoU, fwIoU)."""
from __future__ import annotations

import io

import numpy as np

from . import IGNORE
from .autograd import ShapeError


class EmptyMatrixError(ValueError):
    pass


class ConfusionMatrix:
    """``counts[i, j]`` = pixels with ground truth ``i`` predicted as ``j``."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(getattr(pred, "classes", pred))
        gt = np.asarray(getattr(gt, "classes", gt))
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        valid = gt != IGNORE
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        c = self.num_classes
        if g.size and (g.max() >= c or p.max() >= c):
            raise ValueError(f"class id out of range for C={c}")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _check(self):
        if self.total == 0:
            raise EmptyMatrixError("confusion matrix has no valid pixels")


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Class with the highest probability along axis -3; ties go to the lowest index."""
    return np.asarray(getattr(probs, "data", probs)).argmax(axis=-3).astype(np.uint8)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both ground truth and prediction."""
    cm._check()
    k = cm.counts.astype(np.float64)
    tp = np.diag(k)
    union = k.sum(0) + k.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def per_class_acc(cm: ConfusionMatrix) -> np.ndarray:
    cm._check()
    k = cm.counts.astype(np.float64)
    gt = k.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(gt > 0, np.diag(k) / gt, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    return float(np.nanmean(per_class_iou(cm)))


def overall_acc(cm: ConfusionMatrix) -> float:
    cm._check()
    return float(np.trace(cm.counts) / cm.total)


def mean_acc(cm: ConfusionMatrix) -> float:
    return float(np.nanmean(per_class_acc(cm)))


def fwiou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    freq = cm.counts.sum(1) / cm.total
    present = freq > 0
    return float((freq[present] * iou[present]).sum())


SUMMARY_COLUMNS = ("overall_acc", "mean_acc", "fwiou", "miou")


def summary(cm: ConfusionMatrix) -> dict[str, float]:
    return {"overall_acc": overall_acc(cm), "mean_acc": mean_acc(cm), "fwiou": fwiou(cm), "miou": miou(cm)}


def report_csv(cm: ConfusionMatrix) -> str:
    """Per-class ``class,iou,acc`` block followed by the four-metric summary block."""
    buf = io.StringIO()
    buf.write("class,iou,acc\n")
    for c, (i, a) in enumerate(zip(per_class_iou(cm), per_class_acc(cm))):
        buf.write(f"{c},{_fmt(i)},{_fmt(a)}\n")
    s = summary(cm)
    buf.write(",".join(SUMMARY_COLUMNS) + "\n")
    buf.write(",".join(_fmt(s[k]) for k in SUMMARY_COLUMNS) + "\n")
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"
