"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from famix.errors import ShapeError, UndefinedMetricError
from famix.stats import IGNORE_INDEX

# class order of the 19-class driving benchmarks, used for report columns
CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light", "traffic sign", "vegetation",
    "terrain", "sky", "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle",
)


class ConfusionMatrix:
    """``counts[g, p]`` = pixels of ground-truth class g predicted as p."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} != label shape {gt.shape}")
        keep = gt != self.ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= self.num_classes or p.min() < 0 or p.max() >= self.num_classes):
            raise ShapeError(f"class id outside [0, {self.num_classes - 1}]")
        self.counts += np.bincount(g * self.num_classes + p, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


@dataclass
class EvalReport:
    iou: np.ndarray
    miou: float
    class_names: Sequence[str] = ()
    present: Optional[np.ndarray] = None
    per_dataset: dict = field(default_factory=dict)
    miou_std: float = 0.0
    runs: int = 1

    @property
    def single_run(self) -> bool:
        return self.runs == 1

    def as_dict(self) -> dict:
        names = list(self.class_names) or [str(k) for k in range(len(self.iou))]
        return {
            "miou": self.miou,
            "miou_std": self.miou_std,
            "runs": self.runs,
            "single_run": self.single_run,
            "iou": {n: (None if math.isnan(v) else float(v)) for n, v in zip(names, self.iou)},
            "per_dataset": self.per_dataset,
        }


def miou(cm: ConfusionMatrix, class_names: Sequence[str] = (), zero_union: str = "exclude") -> EvalReport:
    """Per-class IoU = TP / (TP + FP + FN) and its mean.

    ``zero_union`` decides classes absent from both prediction and ground
    truth: ``"exclude"`` (default) drops them from the mean, ``"zero"`` and
    ``"one"`` count them as 0 or 1.
    """
    if cm.total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    if zero_union == "exclude":
        value = float(iou[present].mean())
    elif zero_union in ("zero", "one"):
        filled = np.where(present, iou, 0.0 if zero_union == "zero" else 1.0)
        value = float(filled.mean())
    else:
        raise ValueError(f"unknown zero_union rule {zero_union!r}")
    return EvalReport(iou, value, tuple(class_names), present)


def multi_run_summary(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and sample standard deviation over runs (std is 0 for one run)."""
    if not reports:
        raise UndefinedMetricError("no reports to summarise")
    values = np.array([r.miou for r in reports])
    ious = np.stack([r.iou for r in reports])
    n = len(reports)
    with np.errstate(invalid="ignore"):
        mean_iou = np.nanmean(ious, axis=0) if np.isfinite(ious).any() else ious[0]
    std = float(values.std(ddof=1)) if n > 1 else 0.0
    datasets = {}
    for r in reports:
        for name, v in r.per_dataset.items():
            datasets.setdefault(name, []).append(v)
    per_dataset = {k: {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
                   for k, v in datasets.items()}
    return EvalReport(mean_iou, float(values.mean()), reports[0].class_names, reports[0].present,
                      per_dataset, std, n)
