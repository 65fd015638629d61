"""Scene-completion metrics: IoU, mIoU and occupancy-state statistics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeError, UndefinedMetricError

IGNORE_LABEL = 255
FREE_CLASS = 0


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns prediction."""

    counts: np.ndarray
    ignored: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(pred, gt, num_classes: int, ignore_label: int = IGNORE_LABEL,
                     mask=None) -> ConfusionMatrix:
    """Confusion counts over voxels whose ground truth is not ``ignore_label``.

    ``mask`` optionally restricts evaluation to a subset of voxels.
    """
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth differ in size")
    keep = gt != ignore_label
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape != gt.shape:
            raise ShapeError("mask differs in size from the grids")
        keep &= mask
    p, g = pred[keep], gt[keep]
    if np.any((g < 0) | (g >= num_classes)) or np.any((p < 0) | (p >= num_classes)):
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes ** 2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes),
                           int(np.count_nonzero(gt == ignore_label)))


@dataclass(frozen=True, eq=False)
class IoUResult:
    iou: float
    miou: float
    per_class: np.ndarray     # NaN for the free class and absent classes
    confusion: ConfusionMatrix

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.per_class)


def iou_from_confusion(cm: ConfusionMatrix, free_class: int = FREE_CLASS) -> IoUResult:
    c = cm.counts
    M = c.shape[0]
    occ = np.ones(M, dtype=bool)
    occ[free_class] = False
    tp_occ = c[np.ix_(occ, occ)].sum()
    fp_occ = c[free_class, occ].sum()
    fn_occ = c[occ, free_class].sum()
    union = tp_occ + fp_occ + fn_occ
    iou = float(Fraction(int(tp_occ), int(union))) if union else float("nan")

    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    present = occ & (denom > 0)
    if not np.any(present):
        raise UndefinedMetricError("no semantic class appears in prediction or ground truth")
    # exact rationals, rounded once, so results do not depend on summation order
    ratios = {m: Fraction(int(tp[m]), int(denom[m])) for m in np.flatnonzero(present)}
    per_class = np.full(M, np.nan)
    for m, r in ratios.items():
        per_class[m] = float(r)
    miou = float(sum(ratios.values()) / len(ratios))
    return IoUResult(iou, miou, per_class, cm)


def compute_iou_miou(pred, gt, num_classes: int, free_class: int = FREE_CLASS,
                     ignore_label: int = IGNORE_LABEL, mask=None) -> IoUResult:
    """Binary occupied-vs-free IoU and mean IoU over semantic classes.

    Classes absent from both grids (after masking) are left out of the mean.
    Values are fractions in [0, 1].
    """
    if np.shape(pred) != np.shape(gt):
        raise ShapeError(f"grid shapes differ: {np.shape(pred)} vs {np.shape(gt)}")
    cm = confusion_matrix(pred, gt, num_classes, ignore_label, mask)
    return iou_from_confusion(cm, free_class)


@dataclass(frozen=True)
class OccupancyStats:
    """Occupancy confusion counts; ratios are exact fractions."""

    fn: int
    fp: int
    tp: int
    tn: int

    @property
    def na(self) -> int:
        return self.fn + self.fp + self.tp + self.tn

    @property
    def nv(self) -> int:
        return self.tp + self.fn

    @property
    def fn_over_na(self) -> Fraction:
        return Fraction(self.fn, self.na)

    @property
    def nv_over_na(self) -> Fraction:
        return Fraction(self.nv, self.na)

    @property
    def fn_over_nv(self) -> Fraction:
        if self.nv == 0:
            raise UndefinedMetricError("no occupied voxels in the ground truth")
        return Fraction(self.fn, self.nv)


def occupancy_stats(pred_occ, gt_occ, mask=None) -> OccupancyStats:
    """Counts of predicted vs true occupancy; ``mask`` drops voxels (e.g. ignored)."""
    pred_occ = np.asarray(pred_occ, dtype=bool).reshape(-1)
    gt_occ = np.asarray(gt_occ, dtype=bool).reshape(-1)
    if pred_occ.shape != gt_occ.shape:
        raise ShapeError("occupancy grids differ in size")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        pred_occ, gt_occ = pred_occ[mask], gt_occ[mask]
    if pred_occ.size == 0:
        raise ValueError("occupancy statistics need at least one voxel")
    return OccupancyStats(
        fn=int(np.count_nonzero(~pred_occ & gt_occ)),
        fp=int(np.count_nonzero(pred_occ & ~gt_occ)),
        tp=int(np.count_nonzero(pred_occ & gt_occ)),
        tn=int(np.count_nonzero(~pred_occ & ~gt_occ)),
    )


def _names(num_classes, class_names):
    if class_names is None:
        return [f"class_{c}" for c in range(num_classes)]
    return list(class_names)


def metrics_csv(result: IoUResult, class_names=None) -> str:
    """CSV with one row per class plus IoU / mIoU summary rows (percent)."""
    names = _names(len(result.per_class), class_names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "iou_percent"])
    for name, val in zip(names, result.per_class):
        writer.writerow([name, "" if np.isnan(val) else f"{100 * val:.4f}"])
    writer.writerow(["IoU", f"{100 * result.iou:.4f}"])
    writer.writerow(["mIoU", f"{100 * result.miou:.4f}"])
    return buf.getvalue()


def metrics_table(result: IoUResult, class_names=None, title: str = None) -> str:
    """Fixed-width text table; absent classes show as '-'."""
    names = _names(len(result.per_class), class_names)
    width = max(len(n) for n in names + ["mIoU"]) + 2
    lines = [title] if title else []
    lines.append(f"{'Metric':<{width}}{'Value (%)':>10}")
    lines.append("-" * (width + 10))
    lines.append(f"{'IoU':<{width}}{100 * result.iou:>10.2f}")
    lines.append(f"{'mIoU':<{width}}{100 * result.miou:>10.2f}")
    lines.append("-" * (width + 10))
    for name, val in zip(names, result.per_class):
        cell = "-" if np.isnan(val) else f"{100 * val:.2f}"
        lines.append(f"{name:<{width}}{cell:>10}")
    return "\n".join(lines) + "\n"


def occupancy_table(stats: OccupancyStats) -> str:
    rows = [("FN/Na", stats.fn_over_na), ("Nv/Na", stats.nv_over_na)]
    if stats.nv:
        rows.append(("FN/Nv", stats.fn_over_nv))
    head = "Metric  " + "".join(f"{name:>9}" for name, _ in rows)
    vals = "Value(%)" + "".join(f"{100 * float(v):>9.2f}" for _, v in rows)
    return head + "\n" + vals + "\n"
