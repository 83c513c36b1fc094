"""Confusion-matrix based segmentation scores: per-class F1, mean F1, mIoU, OA."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = 255


class EmptyClassWarning(UserWarning):
    """A class has no ground truth and no predictions; it is left out of the means."""


@dataclass
class ConfusionMatrix:
    """``counts[g, p]`` = scored pixels with ground truth ``g`` predicted as ``p``."""

    num_classes: int
    counts: np.ndarray = field(default=None)
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        keep = truth != self.ignore_label
        p, t = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
        k = self.num_classes
        for name, arr in (("prediction", p), ("truth", t)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise IndexError(f"{name} class index outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignore_label)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _parts(self):
        c = self.counts.astype(np.float64)
        tp = np.diag(c)
        return tp, c.sum(axis=0) - tp, c.sum(axis=1) - tp

    def present(self) -> np.ndarray:
        """Classes with any ground truth or any prediction."""
        return (self.counts.sum(axis=0) + self.counts.sum(axis=1)) > 0


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """F-beta with beta = 1 from precision and recall; NaN for classes never seen."""
    tp, fp, fn = cm._parts()
    out = np.full(cm.num_classes, np.nan)
    for k in range(cm.num_classes):
        if tp[k] + fp[k] + fn[k] == 0:
            continue
        precision = tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] else 0.0
        recall = tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else 0.0
        beta2 = 1.0
        denom = beta2 * precision + recall
        out[k] = (1 + beta2) * precision * recall / denom if denom else 0.0
    return out


def f1_counting(cm: ConfusionMatrix) -> np.ndarray:
    """Same scores via ``2 TP / (2 TP + FP + FN)``."""
    tp, fp, fn = cm._parts()
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), np.nan)


def _nanmean_with_warning(values: np.ndarray, what: str) -> float:
    missing = np.isnan(values)
    if missing.all():
        raise ValueError(f"{what}: no class has any support")
    if missing.any():
        warnings.warn(f"{what}: classes {np.flatnonzero(missing).tolist()} have no support "
                      "and are excluded from the mean", EmptyClassWarning, stacklevel=3)
    return float(values[~missing].mean())


def mean_f1(cm: ConfusionMatrix) -> float:
    return _nanmean_with_warning(f1_per_class(cm), "mean F1")


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    tp, fp, fn = cm._parts()
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("mIoU undefined: no scored pixels")
    return _nanmean_with_warning(iou_per_class(cm), "mIoU")


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("overall accuracy undefined: no scored pixels")
    return float(np.trace(cm.counts) / cm.total)


def report(cm: ConfusionMatrix, class_names: list[str] | None = None) -> dict:
    names = class_names or [f"class_{k}" for k in range(cm.num_classes)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyClassWarning)
        f1 = f1_per_class(cm)
        out = {
            "per_class_f1": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, f1)},
            "mean_f1": mean_f1(cm),
            "miou": miou(cm),
            "oa": overall_accuracy(cm),
            "pixels": int(cm.total),
            "support": {n: int(s) for n, s in zip(names, cm.counts.sum(axis=1))},
        }
    return out


def report_json(rep: dict) -> str:
    return json.dumps(rep, sort_keys=True, separators=(",", ":"))


def format_table(rows: list[tuple[str, dict]], per_class: bool = False) -> str:
    """Plain-text table with one row per model: mean F1 and OA (optionally mIoU and per-class F1)."""
    if not rows:
        return ""
    names = list(rows[0][1]["per_class_f1"]) if per_class else []
    header = ["Model"] + names + ["mean F1"] + (["mIoU"] if per_class else []) + ["OA"]
    body = []
    for label, rep in rows:
        cells = [label]
        for n in names:
            v = rep["per_class_f1"][n]
            cells.append("-" if v is None else f"{100 * v:.2f}")
        cells.append(f"{100 * rep['mean_f1']:.2f}")
        if per_class:
            cells.append(f"{100 * rep['miou']:.2f}")
        cells.append(f"{100 * rep['oa']:.2f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines)
