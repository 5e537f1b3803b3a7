"""Single-view flipped TSDF encoding with per-voxel visibility classes."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import EmptySceneError
from .grid import CameraModel, GridSpec, TsdfVolume, Visibility, world_to_voxel_array

DEFAULT_TRUNCATION = 0.24


def surface_from_depth(depth: np.ndarray, cam: CameraModel, spec: GridSpec) -> np.ndarray:
    """Boolean mask of voxels hit by at least one back-projected valid pixel."""
    points, _ = cam.backproject(depth)
    idx = world_to_voxel_array(spec, points)
    idx = idx[idx[:, 0] >= 0]
    mask = np.zeros(spec.dims, dtype=bool)
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return mask


def classify_visibility(
    depth: np.ndarray, cam: CameraModel, spec: GridSpec, truncation: float = DEFAULT_TRUNCATION
) -> np.ndarray:
    """Free / Surface / Occluded / Outside code for every voxel center.

    A voxel is Surface when its camera depth is within ``truncation / 2`` of
    the depth observed at the pixel its center projects to.
    """
    cam.check_image(depth, "depth")
    h, w = cam.image_size
    row, col, z = cam.project(spec.centers())
    on_image = (z > 0) & (row >= 0) & (row < h) & (col >= 0) & (col < w)
    observed = np.zeros(spec.dims)
    observed[on_image] = depth[row[on_image], col[on_image]]
    valid = on_image & (observed > 0)

    band = truncation / 2.0
    vis = np.full(spec.dims, Visibility.OUTSIDE, dtype=np.uint8)
    vis[valid & (z < observed - band)] = Visibility.FREE
    vis[valid & (np.abs(z - observed) <= band)] = Visibility.SURFACE
    vis[valid & (z > observed + band)] = Visibility.OCCLUDED
    return vis


def _signed_flip(distance: np.ndarray, visibility: np.ndarray, truncation: float) -> np.ndarray:
    sign = np.where(visibility == Visibility.OCCLUDED, -1.0, 1.0)
    values = sign * np.maximum(0.0, 1.0 - distance / truncation)
    values[visibility == Visibility.OUTSIDE] = 0.0
    return values


def tsdf_from_visibility(visibility: np.ndarray, spec: GridSpec, truncation: float) -> TsdfVolume:
    """Distance stage: flipped TSDF from an existing visibility volume."""
    if not truncation > 0:
        raise ValueError(f"truncation must be positive, got {truncation}")
    surface = visibility == Visibility.SURFACE
    if not surface.any():
        raise EmptySceneError("no Surface voxels; cannot compute distances")
    # exact Euclidean distance to the nearest Surface voxel center
    distance = ndimage.distance_transform_edt(~surface, sampling=spec.voxel_size)
    return TsdfVolume(_signed_flip(distance, visibility, truncation), visibility, spec, truncation)


def tsdf_encode(
    depth: np.ndarray, cam: CameraModel, spec: GridSpec, truncation: float = DEFAULT_TRUNCATION
) -> TsdfVolume:
    if not truncation > 0:
        raise ValueError(f"truncation must be positive, got {truncation}")
    visibility = classify_visibility(depth, cam, spec, truncation)
    return tsdf_from_visibility(visibility, spec, truncation)


def tsdf_oracle(
    surface: np.ndarray, visibility: np.ndarray, spec: GridSpec, truncation: float, chunk: int = 2048
) -> TsdfVolume:
    """Reference distance stage by exhaustive scan over all (voxel, surface voxel) pairs."""
    if not truncation > 0:
        raise ValueError(f"truncation must be positive, got {truncation}")
    src = spec.centers()[surface]
    if len(src) == 0:
        raise EmptySceneError("no Surface voxels; cannot compute distances")
    pts = spec.centers().reshape(-1, 3)
    nearest = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        d2 = ((block[:, None, :] - src[None, :, :]) ** 2).sum(axis=-1)
        nearest[start:start + chunk] = np.sqrt(d2.min(axis=1))
    distance = nearest.reshape(spec.dims)
    return TsdfVolume(_signed_flip(distance, visibility, truncation), visibility, spec, truncation)
