"""Confusion-matrix accumulation, per-class IoU and metrics reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_CLASS_NAMES = ("background", "car", "pedestrian", "cyclist")


@dataclass
class SegMetrics:
    """Confusion counts over valid pixels (rows: groundtruth, cols: prediction)."""

    num_classes: int
    confusion: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def copy(self) -> "SegMetrics":
        return SegMetrics(self.num_classes, self.confusion.copy())

    def update(self, pred, gt, mask=None) -> "SegMetrics":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match groundtruth {gt.shape}")
        if mask is None:
            valid = np.ones(gt.shape, dtype=bool)
        else:
            valid = np.asarray(mask) > 0
            if valid.shape != gt.shape:
                raise ValueError(f"mask shape {valid.shape} does not match groundtruth {gt.shape}")
        k = self.num_classes
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        self.confusion += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "SegMetrics") -> "SegMetrics":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge metrics with different class counts")
        return SegMetrics(self.num_classes, self.confusion + other.confusion)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def vacuous(self) -> np.ndarray:
        """Classes absent from both prediction and groundtruth."""
        return (self.confusion.sum(axis=0) + self.confusion.sum(axis=1)) == 0

    @property
    def per_class_iou(self) -> np.ndarray:
        return iou_per_class(self)

    @property
    def mean_iou_foreground(self) -> float:
        """Mean IoU over non-background classes, vacuous ones excluded."""
        iou = self.per_class_iou[1:]
        keep = ~self.vacuous[1:]
        return float(iou[keep].mean()) if keep.any() else 1.0

    @property
    def pixel_accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0


def accumulate_confusion(pred_labels, gt_labels, mask, metrics: SegMetrics) -> SegMetrics:
    return metrics.update(pred_labels, gt_labels, mask)


def iou_per_class(metrics: SegMetrics) -> np.ndarray:
    """TP / (TP + FP + FN) per class; 1.0 for vacuous classes."""
    cm = metrics.confusion.astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, 1.0)


def format_table(metrics: SegMetrics, class_names: Sequence[str] = DEFAULT_CLASS_NAMES, title: str = "IoU (%)") -> str:
    """Plain-text table: one IoU column per foreground class plus the average."""
    names = list(class_names)[1 : metrics.num_classes]
    iou = metrics.per_class_iou
    vac = metrics.vacuous
    cells = []
    for i, _ in enumerate(names, start=1):
        cells.append("n/a" if vac[i] else f"{100 * iou[i]:.1f}")
    cells.append(f"{100 * metrics.mean_iou_foreground:.1f}")
    headers = names + ["average"]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    label_w = max(len(title), 8)
    lines = [
        " ".join([title.ljust(label_w)] + [h.rjust(w) for h, w in zip(headers, widths)]),
        " ".join(["".ljust(label_w)] + [c.rjust(w) for c, w in zip(cells, widths)]),
        f"pixel accuracy: {100 * metrics.pixel_accuracy:.2f}%  scored: {metrics.total}",
    ]
    return "\n".join(lines) + "\n"


def metrics_to_kv(metrics: SegMetrics, class_names: Sequence[str] = DEFAULT_CLASS_NAMES, prefix: str = "pixel") -> list:
    iou = metrics.per_class_iou
    vac = metrics.vacuous
    lines = []
    for i in range(metrics.num_classes):
        name = class_names[i] if i < len(class_names) else f"class{i}"
        lines.append(f"{prefix}.iou.{name} = {100 * iou[i]:.4f}")
        lines.append(f"{prefix}.vacuous.{name} = {int(vac[i])}")
    lines.append(f"{prefix}.mean_iou_foreground = {100 * metrics.mean_iou_foreground:.4f}")
    lines.append(f"{prefix}.pixel_accuracy = {100 * metrics.pixel_accuracy:.4f}")
    lines.append(f"{prefix}.scored = {metrics.total}")
    return lines


def write_metrics_file(path, sections: dict, class_names: Sequence[str] = DEFAULT_CLASS_NAMES) -> None:
    """Write ``{prefix: SegMetrics}`` as ``key = value`` lines (percentages)."""
    lines = ["# riunet metrics v1"]
    for prefix, m in sections.items():
        lines.extend(metrics_to_kv(m, class_names, prefix))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_file(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = float(value)
    return out
