"""Scene completion (SC) and semantic scene completion (SSC) metrics.

Zero-denominator convention, applied everywhere: a ratio whose denominator
is zero is 0 when positives exist elsewhere in the tally and 1 when there
are no positives at all.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import EmptyEvalError, ShapeError
from .grid import IGNORE, NUM_CLASSES, Visibility

SEMANTIC = tuple(range(1, NUM_CLASSES))


class EvalRegion(enum.IntEnum):
    OCCLUDED = 0
    VISIBLE = 1
    EXCLUDED = 2


def eval_regions(visibility: np.ndarray, gt) -> np.ndarray:
    """Occluded / visible evaluation region per voxel; everything else is excluded.

    Outside-frustum voxels and ignore labels are always excluded; free space
    is excluded as well.
    """
    gt = _labels(gt)
    vis = np.asarray(visibility)
    if vis.shape != gt.shape:
        raise ShapeError(f"visibility {vis.shape} and labels {gt.shape} are misaligned")
    region = np.full(gt.shape, EvalRegion.EXCLUDED, dtype=np.uint8)
    labelled = gt != IGNORE
    region[labelled & (vis == Visibility.OCCLUDED)] = EvalRegion.OCCLUDED
    region[labelled & (vis == Visibility.SURFACE)] = EvalRegion.VISIBLE
    return region


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x))


def _ratio(num: int, den: int, any_positive: bool) -> float:
    if den == 0:
        return 0.0 if any_positive else 1.0
    return num / den


def sc_from_counts(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    any_pos = (tp + fp + fn) > 0
    return (
        _ratio(tp, tp + fp, any_pos),
        _ratio(tp, tp + fn, any_pos),
        _ratio(tp, tp + fp + fn, any_pos),
    )


def iou_from_precision_recall(precision: float, recall: float) -> float:
    """IoU implied by a precision/recall pair: 1 / (1/p + 1/r - 1)."""
    if precision <= 0 or recall <= 0:
        return 0.0
    return 1.0 / (1.0 / precision + 1.0 / recall - 1.0)


def _check(pred, gt, mask):
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeError(
            f"shape mismatch: prediction {pred.shape}, ground truth {gt.shape}, mask {mask.shape}"
        )
    if not mask.any():
        raise EmptyEvalError("evaluation mask selects no voxels")


def sc_metrics(pred_occupancy, gt, mask) -> Tuple[float, float, float]:
    """Binary occupancy precision, recall and IoU over ``mask`` (ignore labels dropped)."""
    pred = np.asarray(pred_occupancy, dtype=bool)
    gt = _labels(gt)
    mask = np.asarray(mask, dtype=bool)
    _check(pred, gt, mask)
    sel = mask & (gt != IGNORE)
    occ = gt[sel] != 0
    p = pred[sel]
    return sc_from_counts(int(np.sum(p & occ)), int(np.sum(p & ~occ)), int(np.sum(~p & occ)))


def confusion_matrix(pred, gt, mask, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts[gt, pred] over masked, non-ignored voxels."""
    sel = mask & (gt != IGNORE)
    g = gt[sel].astype(np.int64)
    p = pred[sel].astype(np.int64)
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """IoU for semantic classes 1..K-1 from a confusion matrix."""
    out = []
    for c in range(1, cm.shape[0]):
        tp = cm[c, c]
        den = cm[c, :].sum() + cm[:, c].sum() - tp
        # den == 0: class absent from both prediction and ground truth
        out.append(tp / den if den else 1.0)
    return np.asarray(out, dtype=np.float64)


def mean_iou(per_class) -> float:
    return float(np.mean(np.asarray(per_class, dtype=np.float64)))


def ssc_iou(pred_classes, gt, mask) -> Tuple[np.ndarray, float]:
    """Per-class IoU for classes 1..11 and their arithmetic mean."""
    pred = np.asarray(pred_classes)
    gt = _labels(gt)
    mask = np.asarray(mask, dtype=bool)
    _check(pred, gt, mask)
    per_class = iou_from_confusion(confusion_matrix(pred, gt, mask))
    return per_class, mean_iou(per_class)


@dataclass
class ConfusionTally:
    """Running counts over many scenes."""

    confusion: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64))
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def update(self, pred_classes, gt, region) -> "ConfusionTally":
        pred = np.asarray(pred_classes)
        gt = _labels(gt)
        region = np.asarray(region)
        if pred.shape != gt.shape or region.shape != gt.shape:
            raise ShapeError(f"shape mismatch: prediction {pred.shape}, ground truth {gt.shape}")
        ssc_mask = region != EvalRegion.EXCLUDED
        self.confusion += confusion_matrix(pred, gt, ssc_mask)
        occ_mask = (region == EvalRegion.OCCLUDED) & (gt != IGNORE)
        p = pred[occ_mask] != 0
        g = gt[occ_mask] != 0
        self.tp += int(np.sum(p & g))
        self.fp += int(np.sum(p & ~g))
        self.fn += int(np.sum(~p & g))
        self.tn += int(np.sum(~p & ~g))
        return self

    def __add__(self, other: "ConfusionTally") -> "ConfusionTally":
        return ConfusionTally(self.confusion + other.confusion, self.tp + other.tp, self.fp + other.fp,
                              self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def sc(self) -> Tuple[float, float, float]:
        return sc_from_counts(self.tp, self.fp, self.fn)

    def ssc(self) -> Tuple[np.ndarray, float]:
        per_class = iou_from_confusion(self.confusion)
        return per_class, mean_iou(per_class)


def prob_histogram(probs, gt, c: int, bins: int = 100) -> np.ndarray:
    """Counts of p[c] over voxels labelled ``c``, uniform bins on [0, 1]."""
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    p = np.asarray(getattr(probs, "probs", probs))
    gt = _labels(gt)
    if p.shape[1:] != gt.shape:
        raise ShapeError(f"probabilities {p.shape[1:]} and labels {gt.shape} are misaligned")
    values = p[c][gt == c]
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return counts


def band_mass(counts: np.ndarray, lo: float = 0.4, hi: float = 0.6) -> float:
    """Fraction of histogram mass in bins lying inside [lo, hi]."""
    counts = np.asarray(counts)
    total = counts.sum()
    if total == 0:
        return 0.0
    edges = np.linspace(0.0, 1.0, len(counts) + 1)
    inside = (edges[:-1] >= lo - 1e-12) & (edges[1:] <= hi + 1e-12)
    return float(counts[inside].sum() / total)


def histogram_csv(counts: np.ndarray) -> str:
    edges = np.linspace(0.0, 1.0, len(counts) + 1)
    lines = ["bin,lo,hi,count"]
    for i, n in enumerate(counts):
        lines.append(f"{i},{edges[i]:.6f},{edges[i + 1]:.6f},{int(n)}")
    return "\n".join(lines) + "\n"


def consistency_score(pred_classes, gt, mask: Optional[np.ndarray] = None) -> Tuple[Dict[int, float], float]:
    """Per ground-truth class, the fraction of voxels agreeing with the class's modal prediction.

    Only semantic classes present in (masked) ground truth contribute; the
    second value is their mean (nan when none are present).
    """
    pred = np.asarray(pred_classes)
    gt = _labels(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and labels {gt.shape} are misaligned")
    sel = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    scores = {}
    for c in SEMANTIC:
        members = pred[sel & (gt == c)]
        if members.size == 0:
            continue
        scores[c] = float(np.bincount(members.astype(np.int64)).max() / members.size)
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean
