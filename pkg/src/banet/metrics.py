"""Confusion-matrix accumulation and segmentation scores (OA, IoU, F1).

Rows index the reference class, columns the predicted class. Counts are
int64 so full-scene accumulation cannot overflow. Scores are fractions in
[0, 1]; :func:`report` formats them as percentages.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import InvalidArgument

ISPRS_CLASSES = ("imp_surf", "building", "low_veg", "tree", "car", "clutter")
# mean F1 / mIoU on the ISPRS benchmarks are over the five foreground classes
ISPRS_FOREGROUND = ISPRS_CLASSES[:5]


@dataclass
class ConfusionMatrix:
    class_names: tuple[str, ...]
    ignore_label: int | None = None
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        k = len(self.class_names)
        if k == 0:
            raise InvalidArgument("confusion matrix needs at least one class")
        if self.counts is None:
            self.counts = np.zeros((k, k), np.int64)
        else:
            self.counts = np.array(self.counts, np.int64)
            if self.counts.shape != (k, k):
                raise InvalidArgument(f"counts shape {self.counts.shape} != ({k}, {k})")
            if (self.counts < 0).any():
                raise InvalidArgument("counts must be non-negative")

    @classmethod
    def empty(cls, num_classes: int, ignore_label: int | None = None, class_names=None):
        names = class_names or tuple(f"class{i}" for i in range(num_classes))
        return cls(tuple(names), ignore_label)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, ref: np.ndarray) -> "ConfusionMatrix":
        """Add one (prediction, reference) map pair in place; returns self."""
        pred = np.asarray(pred)
        ref = np.asarray(ref)
        if pred.shape != ref.shape:
            raise InvalidArgument(f"prediction shape {pred.shape} != reference shape {ref.shape}")
        keep = np.ones(ref.shape, bool) if self.ignore_label is None else ref != self.ignore_label
        k = self.num_classes
        for name, arr in (("reference", ref), ("prediction", pred)):
            bad = keep & ((arr < 0) | (arr >= k))
            if bad.any():
                pos = tuple(int(i) for i in np.argwhere(bad)[0])
                raise InvalidArgument(f"{name} class {int(arr[pos])} at {pos} outside [0, {k})")
        r = ref[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        self.counts += np.bincount(r * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_names != self.class_names:
            raise InvalidArgument("cannot merge matrices over different classes")
        return ConfusionMatrix(self.class_names, self.ignore_label, self.counts + other.counts)

    __add__ = merge

    def indices(self, subset: Sequence[str] | None) -> list[int]:
        if subset is None:
            return list(range(self.num_classes))
        missing = [s for s in subset if s not in self.class_names]
        if missing:
            raise InvalidArgument(f"unknown classes in subset: {', '.join(missing)}")
        return [self.class_names.index(s) for s in subset]

    def default_subset(self) -> tuple[str, ...] | None:
        """The ISPRS foreground classes when all are present, else every class."""
        if all(c in self.class_names for c in ISPRS_FOREGROUND):
            return ISPRS_FOREGROUND
        return None


def _parts(cm: ConfusionMatrix):
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    return tp, c.sum(axis=0) - tp, c.sum(axis=1) - tp  # tp, fp, fn


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """trace / total; NaN when nothing was scored."""
    total = cm.total
    return float(np.trace(cm.counts) / total) if total else float("nan")


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN); NaN for a class absent from both maps."""
    tp, fp, fn = _parts(cm)
    den = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, tp / np.where(den > 0, den, 1), np.nan)


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """2PR / (P + R) per class, every 0/0 taken as 0."""
    tp, fp, fn = _parts(cm)

    def safe(num, den):
        return np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)

    p = safe(tp, tp + fp)
    r = safe(tp, tp + fn)
    return safe(2 * p * r, p + r)


def _present(cm: ConfusionMatrix) -> np.ndarray:
    tp, fp, fn = _parts(cm)
    return (tp + fp + fn) > 0


def miou(cm: ConfusionMatrix, subset: Sequence[str] | None = None) -> float:
    """Mean IoU over `subset` (default: all), skipping undefined classes."""
    vals = iou_per_class(cm)[cm.indices(subset)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def mean_f1(cm: ConfusionMatrix, subset: Sequence[str] | None = None) -> float:
    """Mean F1 over `subset`, skipping classes absent from both maps (as for mIoU)."""
    idx = cm.indices(subset)
    vals = f1_per_class(cm)[idx][_present(cm)[idx]]
    return float(vals.mean()) if vals.size else float("nan")


def summary(cm: ConfusionMatrix, subset: Sequence[str] | None = None) -> dict[str, float]:
    return {"mean_f1": mean_f1(cm, subset), "oa": overall_accuracy(cm), "miou": miou(cm, subset)}


def _pct(v: float) -> str:
    return "   n/a" if np.isnan(v) else f"{100 * v:6.2f}"


def report(cm: ConfusionMatrix, subset: Sequence[str] | None = "default") -> str:
    """Per-class F1 and IoU, then mean F1, OA and mIoU (percent), then key=value lines.

    ``subset="default"`` picks :meth:`ConfusionMatrix.default_subset`.
    """
    if subset == "default":
        subset = cm.default_subset()
    if cm.total == 0:
        return "no data: confusion matrix is empty\nscored_pixels=0\n"
    f1 = f1_per_class(cm)
    iou = iou_per_class(cm)
    present = _present(cm)
    width = max(8, max(len(n) for n in cm.class_names))
    lines = [f"{'class':<{width}}      F1     IoU"]
    for i, name in enumerate(cm.class_names):
        lines.append(f"{name:<{width}}  {_pct(f1[i] if present[i] else np.nan)}  {_pct(iou[i])}")
    s = summary(cm, subset)
    label = "all classes" if subset is None else ", ".join(subset)
    lines.append("")
    lines.append(f"mean F1  OA      mIoU    ({label})")
    lines.append(f"{_pct(s['mean_f1'])}   {_pct(s['oa'])}  {_pct(s['miou'])}")
    lines.append("")
    for key, val in s.items():
        lines.append(f"{key}={val:.4f}")
    for i, name in enumerate(cm.class_names):
        lines.append(f"f1.{name}={f1[i]:.4f}")
        lines.append(f"iou.{name}={'nan' if np.isnan(iou[i]) else f'{iou[i]:.4f}'}")
    lines.append(f"scored_pixels={cm.total}")
    return "\n".join(lines) + "\n"
