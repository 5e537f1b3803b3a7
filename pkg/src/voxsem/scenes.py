"""Procedural box-world scenes with exact labels, rendered depth and noisy class features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GenerationError
from .grid import CameraModel, FeatureVolume, GridSpec, LabelVolume, TsdfVolume, Visibility, look_rotation
from .project import project_features
from .tsdf import DEFAULT_TRUNCATION, tsdf_encode

FLOOR = 2
WALL = 3
OBJECT_CLASSES = (4, 5, 6, 7, 8, 9, 10, 11)
FEATURE_DIM = 8
# rendered faces sit this fraction of a voxel inside the labelled block, so
# back-projected hits never land exactly on a voxel boundary
FACE_INSET = 0.25
MAX_RETRIES = 100


def make_palette(seed: int, dim: int = FEATURE_DIM, noise_sigma: float = 0.1,
                 classes: Sequence[int] = range(1, 12)) -> Dict[int, np.ndarray]:
    """Unit-norm prototype per class, pairwise further apart than 4 * noise_sigma."""
    rng = np.random.default_rng(seed)
    classes = list(classes)
    for _ in range(1000):
        protos = rng.normal(size=(len(classes), dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        d = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
        if len(classes) < 2 or d[np.triu_indices(len(classes), 1)].min() > 4 * noise_sigma:
            return {c: protos[i] for i, c in enumerate(classes)}
    raise GenerationError("could not draw separable class prototypes")


def default_camera(grid: GridSpec, image_size: Tuple[int, int] = (48, 48), focal: float = 48.0) -> CameraModel:
    """Camera in front of the room (negative y), above it, looking at the room center."""
    ext = np.asarray(grid.dims) * grid.voxel_size
    origin = np.asarray(grid.origin)
    position = origin + np.array([0.5 * ext[0], -0.55 * ext[1], 0.95 * ext[2]])
    target = origin + np.array([0.5 * ext[0], 0.55 * ext[1], 0.25 * ext[2]])
    h, w = image_size
    return CameraModel(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0,
                       look_rotation(target - position), position, image_size)


@dataclass
class SceneSpec:
    seed: int = 0
    grid: GridSpec = field(default_factory=lambda: GridSpec((16, 16, 16), 0.1))
    object_count: Tuple[int, int] = (1, 4)
    object_classes: Tuple[int, ...] = OBJECT_CLASSES
    box_size: Tuple[int, int] = (3, 6)
    noise_sigma: float = 0.1
    truncation: float = DEFAULT_TRUNCATION
    image_size: Tuple[int, int] = (48, 48)
    focal: float = 48.0
    palette: Optional[Dict[int, np.ndarray]] = None

    def __post_init__(self):
        if self.palette is None:
            self.palette = make_palette(self.seed, FEATURE_DIM, self.noise_sigma)
        protos = np.stack([self.palette[c] for c in sorted(self.palette)])
        d = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
        if len(protos) > 1 and d[np.triu_indices(len(protos), 1)].min() <= 4 * self.noise_sigma:
            raise ValueError("class prototypes are not separable at this noise level")
        lo, hi = self.object_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object_count {self.object_count}")

    @property
    def feature_dim(self) -> int:
        return len(next(iter(self.palette.values())))

    def camera(self) -> CameraModel:
        return default_camera(self.grid, self.image_size, self.focal)


@dataclass(frozen=True)
class Box:
    lo: Tuple[int, int, int]  # inclusive voxel index
    hi: Tuple[int, int, int]  # exclusive voxel index
    label: int

    def extent(self, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
        """World-space bounds of the rendered solid."""
        o, s = np.asarray(grid.origin), grid.voxel_size
        return o + (np.asarray(self.lo) + FACE_INSET) * s, o + (np.asarray(self.hi) - FACE_INSET) * s


@dataclass
class SceneSample:
    gt: LabelVolume
    depth: np.ndarray
    feat: np.ndarray
    cam: CameraModel
    tsdf: TsdfVolume
    rf1: FeatureVolume
    counts: np.ndarray
    boxes: List[Box]
    seed: int


def structural_boxes(grid: GridSpec) -> List[Box]:
    X, Y, Z = grid.dims
    return [Box((0, 0, 0), (X, Y, 1), FLOOR), Box((0, Y - 1, 0), (X, Y, Z), WALL)]


def ray_hits(boxes: Sequence[Box], cam: CameraModel, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Z-depth of the nearest box hit per pixel (0 for none) and the hit box index (-1)."""
    h, w = cam.image_size
    rows, cols = np.mgrid[0:h, 0:w]
    # unnormalised so the ray parameter equals camera z-depth
    dirs_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones((h, w))], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ cam.rotation.T
    origin = cam.translation
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for i, box in enumerate(boxes):
            lo, hi = box.extent(grid)
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 0) & (tmin < best)
            best[hit] = tmin[hit]
            which[hit] = i
    depth = np.where(np.isfinite(best), best, 0.0).reshape(h, w)
    return depth, which.reshape(h, w)


def render_depth(boxes: Sequence[Box], cam: CameraModel, grid: GridSpec) -> np.ndarray:
    return ray_hits(boxes, cam, grid)[0]


def rasterize_labels(boxes: Sequence[Box], grid: GridSpec) -> LabelVolume:
    labels = np.zeros(grid.dims, dtype=np.uint8)
    for box in boxes:
        labels[box.lo[0]:box.hi[0], box.lo[1]:box.hi[1], box.lo[2]:box.hi[2]] = box.label
    return LabelVolume(labels, grid)


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> Optional[List[Box]]:
    X, Y, Z = spec.grid.dims
    lo_n, hi_n = spec.object_count
    n = int(rng.integers(lo_n, hi_n + 1))
    smin, smax = spec.box_size
    boxes: List[Box] = []
    occupied = np.zeros(spec.grid.dims, dtype=bool)
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > 50 * max(n, 1):
            break
        size = rng.integers(smin, smax + 1, size=3)
        size[2] = rng.integers(smin, min(smax + 2, Z - 1) + 1)
        x0 = int(rng.integers(0, X - size[0] + 1))
        y0 = int(rng.integers(1, Y - 1 - size[1] + 1))
        lo, hi = (x0, y0, 1), (x0 + int(size[0]), y0 + int(size[1]), 1 + int(size[2]))
        if hi[2] > Z or hi[1] > Y - 1:
            continue
        block = occupied[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        if block.any():
            continue
        block[...] = True
        boxes.append(Box(lo, hi, int(rng.choice(spec.object_classes))))
    return boxes if len(boxes) == n else None


def make_scene(spec: SceneSpec, seed: int) -> SceneSample:
    """Deterministic scene for ``seed``: floor, back wall and 1-4 boxes.

    Placement is resampled until every box shows at least one projected
    (visible) voxel and keeps at least one occluded voxel.
    """
    rng = np.random.default_rng(seed)
    grid = spec.grid
    cam = spec.camera()
    for _ in range(MAX_RETRIES):
        objects = _place_objects(spec, rng)
        if objects is None:
            continue
        boxes = structural_boxes(grid) + objects
        depth, which = ray_hits(boxes, cam, grid)
        feat = np.zeros((spec.feature_dim,) + cam.image_size)
        hit = which >= 0
        hit_labels = np.array([b.label for b in boxes])[which[hit]]
        feat[:, hit] = np.stack([spec.palette[c] for c in hit_labels], axis=1)
        feat[:, hit] += rng.normal(scale=spec.noise_sigma, size=(spec.feature_dim, int(hit.sum())))

        gt = rasterize_labels(boxes, grid)
        tsdf = tsdf_encode(depth, cam, grid, spec.truncation)
        rf1, counts = project_features(feat, depth, cam, grid)
        if all(_object_ok(box, counts, tsdf.visibility) for box in objects):
            return SceneSample(gt, depth, feat, cam, tsdf, rf1, counts, boxes, seed)
    raise GenerationError(f"no valid placement after {MAX_RETRIES} retries (seed {seed})")


def _object_ok(box: Box, counts: np.ndarray, visibility: np.ndarray) -> bool:
    sl = tuple(slice(a, b) for a, b in zip(box.lo, box.hi))
    return bool((counts[sl] > 0).any() and (visibility[sl] == Visibility.OCCLUDED).any())


def make_dataset(spec: SceneSpec, n: int, seed: int) -> List[SceneSample]:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    return [make_scene(spec, seed + i) for i in range(n)]


def train_val_split(samples: Sequence, train_fraction: float = 0.8) -> Tuple[list, list]:
    n_train = int(np.floor(len(samples) * train_fraction + 0.5))
    return list(samples[:n_train]), list(samples[n_train:])
