"""Segmentation metrics from a pixel confusion matrix.

Rows of the matrix are ground truth, columns are predictions. Pixels whose
ground truth equals ``ignore_index`` are dropped before counting.
"""

from __future__ import annotations

import numpy as np

from gatedscale.errors import LabelError, NumericError, ShapeError
from gatedscale.losses import IGNORE_INDEX
from gatedscale.tensor import Tensor


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_index
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= classes):
        raise LabelError(f"predictions must lie in [0, {classes})")
    if g.size and (g.min() < 0 or g.max() >= classes):
        raise LabelError(f"ground truth must lie in [0, {classes}) or equal {ignore_index}")
    return np.bincount(classes * g + p, minlength=classes * classes).reshape(classes, classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """TP / (TP + FP + FN) per class; nan for classes absent from both maps."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def _nanmean(values: np.ndarray) -> float:
    present = values[~np.isnan(values)]
    return float(present.mean()) if present.size else float("nan")


def miou(pred, gt, classes: int, ignore_index: int = IGNORE_INDEX) -> tuple[list[float], float]:
    """Per-class IoU and their mean over classes present in prediction or ground truth."""
    iou = iou_from_confusion(confusion_matrix(pred, gt, classes, ignore_index))
    return [float(v) for v in iou], _nanmean(iou)


def pixel_accuracy(pred, gt, ignore_index: int = IGNORE_INDEX) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_index
    total = int(keep.sum())
    if total == 0:
        raise NumericError("every pixel is ignored; accuracy is undefined")
    return int((pred[keep] == gt[keep]).sum()) / total


def mean_accuracy(pred, gt, classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    cm = confusion_matrix(pred, gt, classes, ignore_index)
    support = cm.sum(axis=1)
    if not support.any():
        raise NumericError("every pixel is ignored; accuracy is undefined")
    return float((np.diag(cm)[support > 0] / support[support > 0]).mean())


def predict(logits: Tensor) -> np.ndarray:
    """Class map (N, H, W); ties go to the lowest class index."""
    return np.argmax(logits.data, axis=1)


class SegEvaluator:
    """Accumulates a confusion matrix over batches."""

    def __init__(self, classes: int, ignore_index: int = IGNORE_INDEX):
        self.classes = classes
        self.ignore_index = ignore_index
        self.confusion = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred, gt) -> None:
        self.confusion += confusion_matrix(pred, gt, self.classes, self.ignore_index)

    def iou(self) -> list[float]:
        return [float(v) for v in iou_from_confusion(self.confusion)]

    def miou(self) -> float:
        return _nanmean(iou_from_confusion(self.confusion))

    def pixel_accuracy(self) -> float:
        total = self.confusion.sum()
        if total == 0:
            raise NumericError("no pixels counted")
        return float(np.trace(self.confusion) / total)

    def mean_accuracy(self) -> float:
        support = self.confusion.sum(axis=1)
        if not support.any():
            raise NumericError("no pixels counted")
        return float((np.diag(self.confusion)[support > 0] / support[support > 0]).mean())
