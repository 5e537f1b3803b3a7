"""Voxel-grid geometry, volume containers, camera model and label downsampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError

NUM_CLASSES = 12
EMPTY = 0
IGNORE = 255

CLASS_NAMES = (
    "empty", "ceil.", "floor", "wall", "win.", "chair",
    "bed", "sofa", "table", "tvs", "furn", "objs",
)


@dataclass(frozen=True)
class ClassTable:
    names: Tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(self.names) != NUM_CLASSES:
            raise ValueError(f"class table needs {NUM_CLASSES} entries, got {len(self.names)}")
        if self.names[0] != "empty":
            raise ValueError("index 0 must be the empty class")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, idx: int) -> str:
        return self.names[idx]

    def index(self, name: str) -> int:
        return self.names.index(name)


CLASSES = ClassTable()


class Visibility(enum.IntEnum):
    FREE = 0
    SURFACE = 1
    OCCLUDED = 2
    OUTSIDE = 3


@dataclass(frozen=True)
class GridSpec:
    """Binds voxel indices to metric world coordinates.

    ``origin`` is the world position of the corner of voxel (0, 0, 0); voxel
    centers sit at ``origin + (index + 0.5) * voxel_size``.
    """

    dims: Tuple[int, int, int]
    voxel_size: float
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if len(self.origin) != 3:
            raise ValueError(f"origin must have 3 components, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (X, Y, Z, 3)."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def scaled(self, factor: int) -> "GridSpec":
        """Grid with voxels ``factor`` times larger over the same extent."""
        if any(d % factor for d in self.dims):
            raise ShapeError(f"factor {factor} does not divide dims {self.dims}")
        return GridSpec(tuple(d // factor for d in self.dims), self.voxel_size * factor, self.origin)


DEFAULT_SPEC = GridSpec((60, 36, 60), 0.08)
TOY_SPEC = GridSpec((16, 16, 16), 0.1)


def voxel_to_world(spec: GridSpec, index) -> np.ndarray:
    idx = np.asarray(index)
    if idx.shape != (3,):
        raise IndexError(f"voxel index must be a triple, got {index!r}")
    for a in range(3):
        if not 0 <= idx[a] < spec.dims[a]:
            raise IndexError(f"voxel index {tuple(index)} out of range for dims {spec.dims}")
    return np.asarray(spec.origin) + (idx + 0.5) * spec.voxel_size


def world_to_voxel(spec: GridSpec, point) -> Optional[Tuple[int, int, int]]:
    """Voxel containing ``point``, or None when it falls outside the grid."""
    idx = world_to_voxel_array(spec, np.asarray(point, dtype=np.float64)[None])[0]
    if idx[0] < 0:
        return None
    return tuple(int(i) for i in idx)


def world_to_voxel_array(spec: GridSpec, points: np.ndarray) -> np.ndarray:
    """Vectorised ``world_to_voxel`` over an (N, 3) array.

    Out-of-grid rows are returned as (-1, -1, -1).
    """
    pts = np.asarray(points, dtype=np.float64)
    idx = np.floor((pts - np.asarray(spec.origin)) / spec.voxel_size)
    dims = np.asarray(spec.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=-1) & np.all(np.isfinite(idx), axis=-1)
    out = np.full(idx.shape, -1, dtype=np.int64)
    out[inside] = idx[inside].astype(np.int64)
    return out


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``rotation``/``translation`` map camera to world coordinates.

    Camera axes follow the usual convention: x right, y down, z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        h, w = (int(s) for s in self.image_size)
        if h < 1 or w < 1:
            raise ValueError(f"bad image size {self.image_size}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "image_size", (h, w))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def check_image(self, image: np.ndarray, what: str = "image") -> None:
        if tuple(image.shape[-2:]) != self.image_size:
            raise ShapeError(
                f"{what} shape {tuple(image.shape[-2:])} does not match camera image_size {self.image_size}"
            )

    def backproject(self, depth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """World points of all valid pixels, plus the (row, col) pixel indices used."""
        self.check_image(depth, "depth")
        rows, cols = np.nonzero(depth > 0)
        d = depth[rows, cols].astype(np.float64)
        cam = np.stack([(cols - self.cx) * d / self.fx, (rows - self.cy) * d / self.fy, d], axis=-1)
        return cam @ self.rotation.T + self.translation, (rows, cols)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest pixel (row, col) and camera depth for world points.

        Points at or behind the camera get depth <= 0; their pixels are meaningless.
        """
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        safe = np.where(z > 0, z, 1.0)
        col = np.floor(self.fx * cam[..., 0] / safe + self.cx + 0.5).astype(np.int64)
        row = np.floor(self.fy * cam[..., 1] / safe + self.cy + 0.5).astype(np.int64)
        return row, col, z


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera looking along ``forward``."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        # looking straight along ``up``: any perpendicular x will do
        x = np.cross(z, (1.0, 0.0, 0.0) if abs(z[0]) < 0.9 else (0.0, 1.0, 0.0))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _check_spec_shape(shape, spec: GridSpec, what: str):
    if tuple(shape) != spec.dims:
        raise ShapeError(f"{what} spatial shape {tuple(shape)} does not match grid dims {spec.dims}")


@dataclass
class FeatureVolume:
    data: np.ndarray  # (C, X, Y, Z)
    spec: GridSpec

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ShapeError(f"feature data must be (C, X, Y, Z), got {self.data.shape}")
        _check_spec_shape(self.data.shape[1:], self.spec, "feature volume")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class LabelVolume:
    labels: np.ndarray  # (X, Y, Z) uint8
    spec: GridSpec

    def __post_init__(self):
        labels = np.asarray(self.labels)
        _check_spec_shape(labels.shape, self.spec, "label volume")
        bad = (labels > EMPTY + NUM_CLASSES - 1) & (labels != IGNORE) | (labels < 0)
        if np.any(bad):
            raise ValueError(f"labels must lie in 0..{NUM_CLASSES - 1} or {IGNORE}")
        self.labels = labels.astype(np.uint8)


@dataclass
class TsdfVolume:
    values: np.ndarray  # (X, Y, Z) in [-1, 1]
    visibility: np.ndarray  # (X, Y, Z) Visibility codes
    spec: GridSpec
    truncation: Optional[float] = None

    def __post_init__(self):
        _check_spec_shape(self.values.shape, self.spec, "tsdf values")
        _check_spec_shape(self.visibility.shape, self.spec, "tsdf visibility")
        self.visibility = np.asarray(self.visibility, dtype=np.uint8)


@dataclass
class ProbVolume:
    """Per-voxel class distribution. ``logits`` has shape (K, X, Y, Z)."""

    logits: np.ndarray
    probs: np.ndarray = field(default=None)
    spec: Optional[GridSpec] = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.probs is None:
            self.probs = softmax(self.logits, axis=0)

    @classmethod
    def from_probs(cls, probs: np.ndarray, spec: Optional[GridSpec] = None) -> "ProbVolume":
        probs = np.asarray(probs)
        return cls(np.log(np.clip(probs.astype(np.float64), 1e-12, None)), probs, spec)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=0).astype(np.uint8)


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def downsample_labels(high: LabelVolume, factor: int = 4) -> LabelVolume:
    """Majority vote over ``factor``^3 blocks.

    Ignore labels (255) do not vote unless the whole block is ignored. Ties go
    to the smallest class index.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    labels = high.labels
    X, Y, Z = labels.shape
    if X % factor or Y % factor or Z % factor:
        raise ShapeError(f"factor {factor} does not divide label dims {labels.shape}")
    if factor == 1:
        return LabelVolume(labels.copy(), high.spec)
    blocks = labels.reshape(X // factor, factor, Y // factor, factor, Z // factor, factor)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(X // factor, Y // factor, Z // factor, -1)
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(NUM_CLASSES)], axis=-1)
    out = np.argmax(counts, axis=-1).astype(np.uint8)
    out[counts.sum(axis=-1) == 0] = IGNORE
    return LabelVolume(out, high.spec.scaled(factor))
