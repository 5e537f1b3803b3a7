"""Classwise completion of sparse projected RGB features.

For each semantic class, every occluded voxel of that class receives the
mean feature vector of the visible voxels of the same class. Visible, free
and outside voxels are left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidClassError, ShapeError
from .grid import IGNORE, NUM_CLASSES, FeatureVolume, Visibility


@dataclass
class CompletionContext:
    class_map: np.ndarray  # (X, Y, Z) class ids
    visible: np.ndarray  # (X, Y, Z) bool
    occluded: np.ndarray  # (X, Y, Z) bool

    def __post_init__(self):
        self.class_map = np.asarray(getattr(self.class_map, "labels", self.class_map))
        self.visible = np.asarray(self.visible, dtype=bool)
        self.occluded = np.asarray(self.occluded, dtype=bool)
        shape = self.class_map.shape
        if self.visible.shape != shape or self.occluded.shape != shape:
            raise ShapeError(
                f"context shapes differ: class_map {shape}, visible {self.visible.shape}, "
                f"occluded {self.occluded.shape}"
            )
        if np.any(self.visible & self.occluded):
            raise ValueError("a voxel cannot be both visible and occluded")

    @classmethod
    def from_scene(cls, class_map, counts: np.ndarray, visibility: np.ndarray) -> "CompletionContext":
        """Visible = projected count > 0; occluded = Occluded visibility minus visible voxels."""
        visible = np.asarray(counts) > 0
        occluded = (np.asarray(visibility) == Visibility.OCCLUDED) & ~visible
        return cls(class_map, visible, occluded)


def _check_class(c: int) -> None:
    if not 1 <= c <= NUM_CLASSES - 1:
        raise InvalidClassError(f"class {c} is not a semantic class (expected 1..{NUM_CLASSES - 1})")


def _check_aligned(data: np.ndarray, ctx: CompletionContext) -> None:
    if data.shape[1:] != ctx.class_map.shape:
        raise ShapeError(f"features {data.shape[1:]} misaligned with context {ctx.class_map.shape}")


def classwise_mean(features: FeatureVolume, ctx: CompletionContext, c: int) -> Optional[np.ndarray]:
    """Mean feature over visible voxels of class ``c``; None when there are none."""
    _check_class(c)
    data = features.data if isinstance(features, FeatureVolume) else np.asarray(features)
    _check_aligned(data, ctx)
    members = ctx.visible & (ctx.class_map == c)
    if not members.any():
        return None
    return data[:, members].mean(axis=1)


def complete_array(data: np.ndarray, ctx: CompletionContext) -> np.ndarray:
    """``complete_features`` on a bare (C, X, Y, Z) array; returns a new array."""
    _check_aligned(data, ctx)
    out = np.array(data, copy=True)
    for c in range(1, NUM_CLASSES):
        mean = classwise_mean(data, ctx, c)
        if mean is None:
            continue
        targets = ctx.occluded & (ctx.class_map == c)
        out[:, targets] = mean[:, None]
    return out


def complete_features(features: FeatureVolume, ctx: CompletionContext) -> FeatureVolume:
    return FeatureVolume(complete_array(features.data, ctx), features.spec)


def class_mismatch_rate(predicted_map: np.ndarray, gt: np.ndarray, occluded: np.ndarray) -> float:
    """Fraction of labelled occluded voxels whose predicted class differs from ground truth."""
    gt = np.asarray(getattr(gt, "labels", gt))
    region = occluded & (gt != IGNORE)
    if not region.any():
        return 0.0
    return float(np.mean(predicted_map[region] != gt[region]))

