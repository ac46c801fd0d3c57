"""IoU bookkeeping, FB-IoU, generalized mIoU and the psi FLOPs count."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

IGNORE = 255


class IoUAccumulator:
    """Per-class intersection / union tallies.

    ``mode="dataset"`` pools counts over everything seen before dividing;
    ``mode="image"`` averages per-image IoUs for each class instead.
    Accumulators add together, so shards can be evaluated separately and merged.
    """

    def __init__(self, num_classes: int, mode: str = "dataset"):
        if mode not in ("dataset", "image"):
            raise ValueError(mode)
        self.num_classes = num_classes
        self.mode = mode
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.image_iou_sum = np.zeros(num_classes, dtype=np.float64)
        self.image_count = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "IoUAccumulator":
        pred = np.asarray(pred).astype(np.int64).ravel()
        gt = np.asarray(gt).astype(np.int64).ravel()
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in size")
        keep = gt != IGNORE
        pred, gt = pred[keep], gt[keep]
        n = self.num_classes
        if pred.size and (pred.max() >= n or gt.max() >= n or pred.min() < 0):
            raise ValueError(f"label ids outside 0..{n - 1}")
        inter = np.bincount(gt[pred == gt], minlength=n)
        area_p = np.bincount(pred, minlength=n)
        area_g = np.bincount(gt, minlength=n)
        union = area_p + area_g - inter
        self.intersection += inter
        self.union += union
        present = union > 0
        self.image_iou_sum[present] += inter[present] / union[present]
        self.image_count[present] += 1
        return self

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        out = IoUAccumulator(self.num_classes, self.mode)
        for name in ("intersection", "union", "image_iou_sum", "image_count"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    __add__ = merge

    def per_class_iou(self) -> dict[int, float]:
        if self.mode == "dataset":
            return {c: float(self.intersection[c] / self.union[c])
                    for c in range(self.num_classes) if self.union[c] > 0}
        return {c: float(self.image_iou_sum[c] / self.image_count[c])
                for c in range(self.num_classes) if self.image_count[c] > 0}

    def miou(self, classes: Iterable[int] | None = None,
             include_background: bool = False) -> float:
        ious = self.per_class_iou()
        if classes is None:
            classes = [c for c in ious if include_background or c != 0]
        vals = [ious[c] for c in classes if c in ious]
        return float(np.mean(vals)) if vals else float("nan")


def accumulate_iou(pred, gt, accumulator: IoUAccumulator) -> IoUAccumulator:
    return accumulator.update(pred, gt)


def fb_iou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Mean of foreground and background IoU, pooled over all pairs."""
    acc = IoUAccumulator(2)
    for p, g in zip(preds, gts):
        acc.update((np.asarray(p) > 0).astype(np.int64),
                   np.where(np.asarray(g) == IGNORE, IGNORE, np.asarray(g) > 0))
    return acc.miou(classes=[0, 1])


def generalized_miou(preds, gts, split) -> tuple[float, float, float]:
    """(mIoU_n, mIoU_b, mIoU_a) of generalized masks against original-id label maps.

    Background is excluded from all three means.
    """
    num_classes = max(max(split.base_classes, default=0),
                      max(split.novel_classes, default=0)) + 1
    acc = IoUAccumulator(num_classes)
    for p, g in zip(preds, gts):
        acc.update(p.to_original(), g)
    return generalized_from_accumulator(acc, split)


def generalized_from_accumulator(acc: IoUAccumulator, split) -> tuple[float, float, float]:
    novel = sorted(split.novel_classes)
    base = sorted(split.base_classes)
    return acc.miou(novel), acc.miou(base), acc.miou(novel + base)


def gram_flops(channels: int, height: int, width: int) -> int:
    """Operation count of psi: two Gram matrices plus the Frobenius norm of their difference."""
    for v in (channels, height, width):
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValueError("dimensions must be positive integers")
    c, n = int(channels), int(height) * int(width)
    return c * c * (4 * n + 3)


def format_flops(count: int) -> str:
    for unit, scale in (("T", 10 ** 12), ("G", 10 ** 9), ("M", 10 ** 6), ("K", 10 ** 3)):
        if count >= scale:
            return f"{count / scale:.2f}{unit}"
    return str(count)


@dataclass
class MetricsRecord:
    fold: int
    seed: int
    miou: float
    fb_iou: float
    per_class_iou: dict = field(default_factory=dict)
    miou_n: float | None = None
    miou_b: float | None = None
    miou_a: float | None = None
    method: str = "bam"
    shots: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        d["per_class_iou"] = {int(k): v for k, v in d.get("per_class_iou", {}).items()}
        return cls(**d)


class ResultsTable:
    """Rows = method/config, columns = folds plus their mean."""

    def __init__(self, metric: str = "miou"):
        self.metric = metric
        self.rows: dict[str, dict[int, float]] = {}

    def add(self, method: str, fold: int, value: float) -> None:
        self.rows.setdefault(method, {})[int(fold)] = float(value)

    @property
    def folds(self) -> list[int]:
        return sorted({f for row in self.rows.values() for f in row})

    def mean(self, method: str) -> float:
        return float(np.mean(list(self.rows[method].values())))

    def to_text(self, scale: float = 100.0) -> str:
        folds = self.folds
        head = ["Method"] + [f"Fold-{f}" for f in folds] + ["Mean"]
        lines = [" | ".join(f"{h:>10}" for h in head)]
        lines.append("-" * len(lines[0]))
        for method, row in self.rows.items():
            cells = [f"{row[f] * scale:10.2f}" if f in row else f"{'-':>10}" for f in folds]
            lines.append(" | ".join([f"{method:>10}"] + cells + [f"{self.mean(method) * scale:10.2f}"]))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric,
                           "rows": {m: {str(f): v for f, v in r.items()}
                                    for m, r in self.rows.items()}}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ResultsTable":
        d = json.loads(text)
        t = cls(d["metric"])
        for m, r in d["rows"].items():
            for f, v in r.items():
                t.add(m, int(f), v)
        return t
