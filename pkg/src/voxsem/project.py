"""Depth-guided scatter of 2-D feature maps into a sparse voxel feature volume."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .errors import ShapeError
from .grid import CameraModel, FeatureVolume, GridSpec, world_to_voxel_array


def project_features(
    feat: np.ndarray, depth: np.ndarray, cam: CameraModel, spec: GridSpec
) -> Tuple[FeatureVolume, np.ndarray]:
    """Mean-scatter each valid pixel's feature vector into the voxel it back-projects to.

    Returns the (C, X, Y, Z) feature volume and the per-voxel pixel count.
    Voxels receiving no pixel keep the zero vector and count 0.
    """
    feat = np.asarray(feat)
    if feat.ndim != 3:
        raise ShapeError(f"feature image must be (C, H, W), got {feat.shape}")
    if feat.shape[1:] != depth.shape:
        raise ShapeError(f"feature image {feat.shape[1:]} and depth {depth.shape} differ in size")
    cam.check_image(depth, "depth")

    C = feat.shape[0]
    points, (rows, cols) = cam.backproject(depth)
    idx = world_to_voxel_array(spec, points)
    keep = idx[:, 0] >= 0
    flat = np.ravel_multi_index(tuple(idx[keep].T), spec.dims)
    values = feat[:, rows[keep], cols[keep]].astype(np.float64)

    n = spec.num_voxels
    counts = np.bincount(flat, minlength=n)
    sums = np.stack([np.bincount(flat, weights=values[c], minlength=n) for c in range(C)]).astype(np.float64)
    data = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return FeatureVolume(data.reshape((C,) + spec.dims), spec), counts.reshape(spec.dims)


def surface_mask(counts: np.ndarray) -> np.ndarray:
    return np.asarray(counts) > 0
