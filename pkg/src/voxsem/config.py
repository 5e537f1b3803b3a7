"""Flat ``key = value`` run configuration.

One file format serves cameras, grid specs and training runs; a file only
needs the keys it cares about. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .grid import CameraModel, GridSpec, look_rotation
from .scenes import SceneSpec, default_camera
from .tsdf import DEFAULT_TRUNCATION

SEED_ENV = "VOXSEM_SEED"
_SECTION = "config"


@dataclass
class Config:
    # grid
    grid_dims: Tuple[int, int, int] = (16, 16, 16)
    voxel_size: float = 0.1
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    # camera; position/target default to the synthetic-scene viewpoint
    fx: float = 48.0
    fy: float = 48.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    image_size: Tuple[int, int] = (48, 48)
    cam_position: Optional[Tuple[float, float, float]] = None
    cam_target: Optional[Tuple[float, float, float]] = None
    truncation: float = DEFAULT_TRUNCATION
    # scenes
    n_scenes: int = 100
    object_count: Tuple[int, int] = (1, 4)
    noise_sigma: float = 0.1
    # model and training
    width: int = 8
    two_stage: bool = True
    reuse_tsdf: bool = True
    lambda1: float = 0.5
    lambda2: float = 0.5
    epochs: int = 20
    base_lr: float = 0.05
    batch_size: int = 2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(d < 1 for d in self.grid_dims):
            raise ConfigError(f"grid_dims must be positive, got {self.grid_dims}")
        if self.truncation <= 0:
            raise ConfigError(f"truncation must be positive, got {self.truncation}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.n_scenes < 1:
            raise ConfigError("epochs, batch_size and n_scenes must be >= 1")
        if (self.cam_position is None) != (self.cam_target is None):
            raise ConfigError("cam_position and cam_target must be given together")

    def grid(self) -> GridSpec:
        return GridSpec(self.grid_dims, self.voxel_size, self.origin)

    def camera(self, grid: Optional[GridSpec] = None) -> CameraModel:
        """Camera from the intrinsics/pose keys; the default pose frames ``grid``."""
        h, w = self.image_size
        cx = (w - 1) / 2.0 if self.cx is None else self.cx
        cy = (h - 1) / 2.0 if self.cy is None else self.cy
        if self.cam_position is None:
            base = default_camera(grid or self.grid(), self.image_size, self.fx)
            rotation, position = base.rotation, base.translation
        else:
            position = np.asarray(self.cam_position, dtype=np.float64)
            forward = np.asarray(self.cam_target, dtype=np.float64) - position
            if np.linalg.norm(forward) == 0:
                raise ConfigError("cam_target coincides with cam_position")
            rotation = look_rotation(forward)
        return CameraModel(self.fx, self.fy, cx, cy, rotation, position, self.image_size)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(seed=self.seed, grid=self.grid(), object_count=self.object_count,
                         noise_sigma=self.noise_sigma, truncation=self.truncation,
                         image_size=self.image_size, focal=self.fx)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_value(key: str, text: str):
    # field annotations are strings under postponed evaluation
    kind = str(_FIELDS[key].type)
    scalar = int if "int" in kind else float
    try:
        if "bool" in kind:
            return _parse_bool(key, text)
        if kind == "Optional[str]":
            return text.strip()
        if "Tuple" in kind:
            parts = [p for p in text.replace(",", " ").split()]
            expected = kind.count(scalar.__name__)
            if len(parts) != expected:
                raise ConfigError(f"{key}: expected {expected} values, got {len(parts)}")
            return tuple(scalar(p) for p in parts)
        return scalar(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from exc


def parse_config(text: str, env: Optional[Dict[str, str]] = None) -> Config:
    """Parse flat ``key = value`` text; unknown keys raise ConfigError.

    ``VOXSEM_SEED`` in ``env`` (default: the process environment) overrides ``seed``.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for key, raw in parser[_SECTION].items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _parse_value("seed", env[SEED_ENV])
    return Config(**values)


def load_config(path, env: Optional[Dict[str, str]] = None) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, env)


# -- ablation plans -------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    fcm: bool = True
    reuse: bool = True
    lambda1: float = 0.5
    lambda2: float = 0.5


@dataclass
class AblationPlan:
    variants: List[Variant] = field(default_factory=list)

    def __post_init__(self):
        names = [v.name for v in self.variants]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"duplicate variant names: {', '.join(dupes)}")


def parse_plan(text: str) -> AblationPlan:
    """One variant per line: ``name: fcm=1 reuse=1 lambda1=0.5 lambda2=0.5``."""
    variants = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, rest = line.partition(":")
        name = name.strip()
        if not sep or not name:
            raise ConfigError(f"plan line {lineno}: expected 'name: key=value ...'")
        kwargs = {}
        for item in rest.split():
            key, eq, val = item.partition("=")
            if not eq:
                raise ConfigError(f"plan line {lineno}: bad item {item!r}")
            if key in ("fcm", "reuse"):
                kwargs[key] = _parse_bool(key, val)
            elif key in ("lambda1", "lambda2"):
                try:
                    kwargs[key] = float(val)
                except ValueError as exc:
                    raise ConfigError(f"plan line {lineno}: {key} must be a number") from exc
                if kwargs[key] < 0:
                    raise ConfigError(f"plan line {lineno}: {key} must be non-negative")
            else:
                raise ConfigError(f"plan line {lineno}: unknown variant key {key!r}")
        variants.append(Variant(name, **kwargs))
    return AblationPlan(variants)
