"""Segmentation metrics (Dice, IoU, HD95, AUPRC) and dataset evaluation.

Distances are in pixels. HD95 pools the directed boundary-to-boundary distances of
both directions and takes the linearly interpolated 95th percentile.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

REPORT_COLUMNS = ["id", "dice", "iou", "hd95", "auprc", "tp", "fp", "fn", "tn"]
UNDEFINED = "undefined"
HD95_RULE = "pooled boundary-to-boundary distances, 95th percentile, linear interpolation, pixel units"


def _masks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN)."""
    pred, gt = _masks(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


def dice_score(pred, gt) -> float:
    tp, fp, fn, _ = confusion_counts(pred, gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def iou_score(pred, gt) -> float:
    tp, fp, fn, _ = confusion_counts(pred, gt)
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def boundary_pixels(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or outside the image."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def _distances_to(target: np.ndarray, at: np.ndarray) -> np.ndarray:
    # EDT of the complement gives each pixel's distance to the nearest target pixel
    return ndimage.distance_transform_edt(~target)[at]


def hd95(pred, gt) -> float | None:
    """95th-percentile symmetric surface distance; ``None`` when either mask is empty."""
    pred, gt = _masks(pred, gt)
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    pooled = np.concatenate([_distances_to(bg, bp), _distances_to(bp, bg)])
    return float(np.percentile(pooled, 95))


def precision_recall_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision and recall at each distinct score used as a ``>=`` threshold, descending."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # final index of each tied run
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_pos = int(labels.sum())
    precision = tp / (tp + fp)
    recall = tp / n_pos if n_pos else np.full(tp.shape, np.nan)
    return s[last], precision, recall


def auprc(scores, labels) -> float | None:
    """Step-interpolated average precision ``sum (R_i - R_{i-1}) P_i``; ``None`` without positives."""
    if not np.asarray(labels).astype(bool).any():
        return None
    _, precision, recall = precision_recall_curve(scores, labels)
    steps = np.diff(recall, prepend=0.0)
    return math.fsum((steps * precision).tolist())


@dataclass
class SampleMetrics:
    id: str
    dice: float
    iou: float
    hd95: float | None
    auprc: float | None
    tp: int
    fp: int
    fn: int
    tn: int


def sample_metrics(sample_id: str, prob, pred, gt) -> SampleMetrics:
    tp, fp, fn, tn = confusion_counts(pred, gt)
    return SampleMetrics(
        id=sample_id,
        dice=dice_score(pred, gt),
        iou=iou_score(pred, gt),
        hd95=hd95(pred, gt),
        auprc=auprc(prob, gt),
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class EvalReport:
    samples: list[SampleMetrics]
    metadata: dict = field(default_factory=lambda: {"hd95_rule": HD95_RULE, "units": "pixels"})

    @property
    def dice(self) -> float:
        return float(np.mean([s.dice for s in self.samples]))

    @property
    def iou(self) -> float:
        return float(np.mean([s.iou for s in self.samples]))

    @property
    def hd95(self) -> float | None:
        return _mean_defined([s.hd95 for s in self.samples])

    @property
    def hd95_undefined(self) -> int:
        return sum(s.hd95 is None for s in self.samples)

    @property
    def auprc(self) -> float | None:
        return _mean_defined([s.auprc for s in self.samples])

    def aggregate(self) -> SampleMetrics:
        return SampleMetrics(
            id="mean",
            dice=self.dice,
            iou=self.iou,
            hd95=self.hd95,
            auprc=self.auprc,
            tp=sum(s.tp for s in self.samples),
            fp=sum(s.fp for s in self.samples),
            fn=sum(s.fn for s in self.samples),
            tn=sum(s.tn for s in self.samples),
        )

    def to_csv(self, path: str | Path) -> None:
        """One row per sample plus a final ``mean`` row (counts summed)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in [*self.samples, self.aggregate()]:
                writer.writerow([row.id, _fmt(row.dice), _fmt(row.iou), _fmt(row.hd95), _fmt(row.auprc),
                                 row.tp, row.fp, row.fn, row.tn])

    @classmethod
    def from_csv(cls, path: str | Path) -> EvalReport:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != REPORT_COLUMNS:
                raise ValueError(f"unexpected report columns {reader.fieldnames}")
            rows = [r for r in reader if r["id"] != "mean"]
        return cls([
            SampleMetrics(
                id=r["id"], dice=float(r["dice"]), iou=float(r["iou"]), hd95=_parse(r["hd95"]),
                auprc=_parse(r["auprc"]), tp=int(r["tp"]), fp=int(r["fp"]), fn=int(r["fn"]), tn=int(r["tn"]),
            )
            for r in rows
        ])


def _fmt(value: float | None) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


def _parse(text: str) -> float | None:
    return None if text == UNDEFINED else float(text)


def evaluate(dataset: Sequence, params, config, schedule, seed: int = 0, threshold: float = 0.5) -> EvalReport:
    """Sample a mask for each item and score it against the item's ground truth."""
    from .data import sample_seed
    from .sampler import sample_mask

    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    rows = []
    for i, item in enumerate(dataset):
        pred = sample_mask(item.image, params, config, schedule, seed=sample_seed(seed, i), threshold=threshold)
        rows.append(sample_metrics(item.id, pred.prob, pred.mask, item.mask))
    return EvalReport(rows)
