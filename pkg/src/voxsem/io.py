"""VGRID volume files, depth PNGs and atomic writes.

VGRID layout (little-endian)::

    magic "VGRD" | version u16 | kind u8 | channels u32 | dims 3*u32 |
    voxel_size f32 | origin 3*f32 | payload

The payload is channel-major, then X-major (C-order over (C, X, Y, Z)).
"""

from __future__ import annotations

import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import FormatError
from .grid import FeatureVolume, GridSpec, LabelVolume, ProbVolume, TsdfVolume

MAGIC = b"VGRD"
VERSION = 1
HEADER = struct.Struct("<4sHBI3If3f")

KIND_FEATURE = 0
KIND_LABEL = 1
KIND_TSDF = 2
KIND_PROB = 3

_DTYPES = {
    KIND_FEATURE: np.dtype("<f4"),
    KIND_LABEL: np.dtype("u1"),
    KIND_TSDF: np.dtype("<f4"),
    KIND_PROB: np.dtype("<f4"),
}

Volume = Union[FeatureVolume, LabelVolume, TsdfVolume, ProbVolume]
PathLike = Union[str, os.PathLike]


@contextmanager
def atomic_path(path: PathLike):
    """Yield a temp path next to ``path``; rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_vgrid(kind: int, data: np.ndarray, spec: GridSpec) -> bytes:
    if kind not in _DTYPES:
        raise ValueError(f"unknown VGRID kind {kind}")
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or tuple(data.shape[1:]) != spec.dims:
        raise ValueError(f"payload shape {data.shape} does not match dims {spec.dims}")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[kind])
    header = HEADER.pack(MAGIC, VERSION, kind, data.shape[0], *spec.dims, spec.voxel_size, *spec.origin)
    return header + payload.tobytes()


def _f32(v: float) -> float:
    # shortest decimal that round-trips in float32, so 0.08 reads back as 0.08
    return float(np.format_float_scientific(np.float32(v), unique=True))


def decode_vgrid(buf: bytes) -> Tuple[int, np.ndarray, GridSpec]:
    """Parse VGRID bytes into (kind, data of shape (C, X, Y, Z), spec)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    _, version, kind, channels, x, y, z, voxel_size, ox, oy, oz = HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if kind not in _DTYPES:
        raise FormatError(f"unknown kind {kind}", 6)
    if kind in (KIND_LABEL, KIND_TSDF) and channels != 1:
        raise FormatError(f"kind {kind} requires 1 channel, header says {channels}", 7)
    try:
        spec = GridSpec((x, y, z), _f32(voxel_size), (_f32(ox), _f32(oy), _f32(oz)))
    except ValueError as exc:
        raise FormatError(f"invalid grid in header: {exc}", 11) from exc
    dtype = _DTYPES[kind]
    expected = channels * x * y * z * dtype.itemsize
    actual = len(buf) - HEADER.size
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual}", HEADER.size
        )
    data = np.frombuffer(buf, dtype=dtype, offset=HEADER.size).reshape(channels, x, y, z)
    if dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise FormatError("non-finite values in float payload", HEADER.size)
    return kind, data.copy(), spec


def write_vgrid(path: PathLike, kind: int, data: np.ndarray, spec: GridSpec) -> None:
    atomic_write_bytes(path, encode_vgrid(kind, data, spec))


def read_vgrid(path: PathLike, expect_kind: int = None) -> Tuple[int, np.ndarray, GridSpec]:
    kind, data, spec = decode_vgrid(Path(path).read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: dtype mismatch, expected kind {expect_kind}, found kind {kind}", 6)
    return kind, data, spec


def visibility_path(path: PathLike) -> Path:
    """Sibling file holding the visibility codes of a TSDF volume."""
    path = Path(path)
    return path.with_name(path.stem + ".vis" + (path.suffix or ".vgrid"))


def save_volume(path: PathLike, volume: Volume) -> None:
    """Write a volume as VGRID. Float payloads are stored as float32.

    A TsdfVolume writes its values (kind 2) plus its visibility codes to
    ``visibility_path(path)`` (kind 1).
    """
    if isinstance(volume, FeatureVolume):
        write_vgrid(path, KIND_FEATURE, volume.data, volume.spec)
    elif isinstance(volume, LabelVolume):
        write_vgrid(path, KIND_LABEL, volume.labels, volume.spec)
    elif isinstance(volume, TsdfVolume):
        write_vgrid(path, KIND_TSDF, volume.values, volume.spec)
        write_vgrid(visibility_path(path), KIND_LABEL, volume.visibility, volume.spec)
    elif isinstance(volume, ProbVolume):
        spec = volume.spec or GridSpec(volume.probs.shape[1:], 1.0)
        write_vgrid(path, KIND_PROB, volume.probs, spec)
    else:
        raise TypeError(f"cannot serialise {type(volume).__name__}")


def load_volume(path: PathLike) -> Volume:
    kind, data, spec = read_vgrid(path)
    if kind == KIND_FEATURE:
        return FeatureVolume(data, spec)
    if kind == KIND_LABEL:
        return LabelVolume(data[0], spec)
    if kind == KIND_TSDF:
        _, vis, vspec = read_vgrid(visibility_path(path), expect_kind=KIND_LABEL)
        if vspec.dims != spec.dims:
            raise FormatError(f"visibility dims {vspec.dims} differ from tsdf dims {spec.dims}", 11)
        return TsdfVolume(data[0], vis[0], spec)
    return ProbVolume.from_probs(data, spec)


def read_depth_png(path: PathLike) -> np.ndarray:
    """16-bit PNG in millimetres to a float64 depth image in metres (0 = invalid)."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.int64)
    if arr.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be single-channel, got shape {arr.shape}", 0)
    return arr.astype(np.float64) / 1000.0


def write_depth_png(path: PathLike, depth: np.ndarray) -> None:
    from PIL import Image

    mm = np.rint(np.asarray(depth, dtype=np.float64) * 1000.0)
    if np.any(mm < 0) or np.any(mm > 65535):
        raise ValueError("depth out of range for 16-bit millimetre PNG")
    img = Image.fromarray(mm.astype(np.uint16))
    with atomic_path(path) as tmp:
        img.save(tmp, format="PNG")
