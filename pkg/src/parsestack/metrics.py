"""Segmentation metrics computed from confusion matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .hierarchy import LabelHierarchy, LabelMapSet


@dataclass
class ConfusionMatrix:
    """Pixel counts with rows indexed by groundtruth and columns by prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from groundtruth {gt.shape}")
    for name, arr in (("prediction", pred), ("groundtruth", gt)):
        bad = (arr < 0) | (arr >= num_classes)
        if bad.any():
            pos = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"{name} value {arr[pos]} at position {pos} outside [0, {num_classes})")
    flat = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return ConfusionMatrix(np.bincount(flat, minlength=num_classes**2).reshape(num_classes, num_classes))


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where a class is absent from both groundtruth and prediction."""
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)


def miou(cm: ConfusionMatrix, absent_as_zero: bool = False) -> float:
    """Mean IoU over classes seen in groundtruth or prediction.

    With ``absent_as_zero`` every class counts, absent ones scoring 0.
    """
    iou = per_class_iou(cm)
    if absent_as_zero:
        return float(np.nan_to_num(iou, nan=0.0).mean())
    present = ~np.isnan(iou)
    if not present.any():
        raise ValueError("mIoU undefined: no class appears in groundtruth or prediction")
    return float(iou[present].mean())


class AtrMetrics(NamedTuple):
    accuracy: float
    fg_accuracy: float
    avg_precision: float
    avg_recall: float
    avg_f1: float


def atr_metrics(cm: ConfusionMatrix, background_index: int = 0) -> AtrMetrics:
    """Pixel accuracy, foreground accuracy and class-averaged precision / recall / F1.

    Averages run over foreground classes present in groundtruth or
    prediction. Foreground quantities are NaN when undefined.
    """
    if cm.num_classes < 2:
        raise ValueError("ATR metrics need at least two classes")
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    fg = np.arange(cm.num_classes) != background_index
    acc = tp.sum() / total
    fg_gt = rows[fg].sum()
    fg_acc = tp[fg].sum() / fg_gt if fg_gt > 0 else math.nan
    keep = fg & ((rows > 0) | (cols > 0))
    if not keep.any():
        return AtrMetrics(float(acc), float(fg_acc), math.nan, math.nan, math.nan)
    prec = np.where(cols > 0, tp / np.where(cols > 0, cols, 1), 0.0)
    rec = np.where(rows > 0, tp / np.where(rows > 0, rows, 1), 0.0)
    denom = prec + rec
    f1 = np.where(denom > 0, 2 * prec * rec / np.where(denom > 0, denom, 1), 0.0)
    return AtrMetrics(
        float(acc), float(fg_acc), float(prec[keep].mean()), float(rec[keep].mean()), float(f1[keep].mean())
    )


def consistency(preds: LabelMapSet | Sequence[np.ndarray], h: LabelHierarchy) -> float:
    """Share of pixels whose finer prediction merges onto the coarser one, averaged over adjacent levels."""
    maps = list(preds.maps if isinstance(preds, LabelMapSet) else preds)
    if len(maps) < 2:
        return 1.0
    scores = []
    for k in range(len(maps) - 1):
        table = np.asarray(h.levels[k].merge_from_finer)
        scores.append(float(np.mean(table[maps[k + 1]] == maps[k])))
    return float(np.mean(scores))


@dataclass
class LevelMetrics:
    miou: float
    per_class_iou: list[float]
    accuracy: float
    fg_accuracy: float
    avg_precision: float
    avg_recall: float
    avg_f1: float
    confusion: ConfusionMatrix = field(repr=False)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, background_index: int = 0) -> "LevelMetrics":
        atr = atr_metrics(cm, background_index)
        return cls(
            miou=miou(cm),
            per_class_iou=per_class_iou(cm).tolist(),
            accuracy=atr.accuracy,
            fg_accuracy=atr.fg_accuracy,
            avg_precision=atr.avg_precision,
            avg_recall=atr.avg_recall,
            avg_f1=atr.avg_f1,
            confusion=cm,
        )


@dataclass
class MetricsReport:
    """Per-level metrics keyed by hierarchy level index, plus cross-level consistency."""

    levels: dict[int, LevelMetrics]
    level_names: dict[int, str]
    consistency: float = math.nan

    CSV_HEADER = "level,name,miou,accuracy,fg_accuracy,avg_precision,avg_recall,avg_f1,consistency"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for k in sorted(self.levels):
            m = self.levels[k]
            vals = [m.miou, m.accuracy, m.fg_accuracy, m.avg_precision, m.avg_recall, m.avg_f1, self.consistency]
            # repr keeps every bit, so a re-evaluation can be compared exactly
            lines.append(f"{k},{self.level_names[k]}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'level':<10}{'mIoU':>8}{'acc':>8}{'fg acc':>8}{'prec':>8}{'recall':>8}{'F1':>8}"
        rows = [head, "-" * len(head)]
        for k in sorted(self.levels):
            m = self.levels[k]
            rows.append(
                f"{self.level_names[k]:<10}{m.miou:>8.4f}{m.accuracy:>8.4f}{m.fg_accuracy:>8.4f}"
                f"{m.avg_precision:>8.4f}{m.avg_recall:>8.4f}{m.avg_f1:>8.4f}"
            )
        rows.append(f"cross-level consistency: {self.consistency:.4f}")
        return "\n".join(rows)


def build_report(
    preds: Sequence[LabelMapSet], gts: Sequence[LabelMapSet], h: LabelHierarchy, levels: Sequence[int] | None = None
) -> MetricsReport:
    """Accumulate confusion over samples. ``preds[i][j]`` predicts hierarchy level ``levels[j]``."""
    levels = list(range(h.num_levels)) if levels is None else list(levels)
    cms = {k: ConfusionMatrix.zeros(h.num_classes(k)) for k in levels}
    cons = []
    for p, g in zip(preds, gts):
        for j, k in enumerate(levels):
            cms[k] += confusion(p[j], g[k], h.num_classes(k))
        if levels == list(range(h.num_levels)):
            cons.append(consistency(p, h))
    return MetricsReport(
        levels={k: LevelMetrics.from_confusion(cm) for k, cm in cms.items()},
        level_names={k: h.levels[k].name for k in levels},
        consistency=float(np.mean(cons)) if cons else math.nan,
    )
