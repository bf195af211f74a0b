"""Volumes, embedding maps and their on-disk formats.

A volume is stored as a sidecar pair: ``<name>.raw`` holds the little-endian
C-order payload and ``<name>.meta`` a small JSON document describing it.
Embedding maps use a single binary file with an ``APEM`` header.
"""
from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Volume",
    "EmbeddingMap",
    "VolumeFormatError",
    "MissingFileError",
    "HeaderError",
    "ShapeMismatchError",
    "InvalidChannelError",
    "load_volume",
    "save_volume",
    "load_array",
    "save_array",
    "load_embedding_map",
    "save_embedding_map",
    "foreground_crop",
    "CropResult",
]

_EMB_MAGIC = b"APEM"
_EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sB3I3f3f")

_DTYPES = {"int16": "<i2", "uint8": "u1"}


class VolumeFormatError(ValueError):
    """Base class for everything that can go wrong while reading a file."""


class MissingFileError(VolumeFormatError, FileNotFoundError):
    pass


class HeaderError(VolumeFormatError):
    pass


class ShapeMismatchError(VolumeFormatError):
    pass


class InvalidChannelError(VolumeFormatError):
    pass


def _triple(values, name: str) -> tuple[float, float, float]:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    return out  # type: ignore[return-value]


@dataclass(eq=False)
class Volume:
    """3D scalar image with its physical grid.

    The physical coordinate (mm) of voxel index ``v`` is ``origin + v * spacing``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D and non-empty, got shape {self.data.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def index_to_mm(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def mm_to_index(self, point) -> np.ndarray:
        """Continuous (unrounded) voxel index of a physical point."""
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical coordinates of the first and last voxel centers."""
        return self.index_to_mm((0, 0, 0)), self.index_to_mm(np.asarray(self.shape) - 1)

    def physical_volume(self) -> float:
        """Volume of the full voxel grid in mm^3."""
        return float(np.prod(np.asarray(self.shape) * np.asarray(self.spacing)))

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


def _f32(values) -> tuple[float, float, float]:
    # metadata is stored as float32 on disk, so keep it float32-exact in memory
    return tuple(float(np.float32(v)) for v in values)  # type: ignore[return-value]


@dataclass(eq=False)
class EmbeddingMap:
    """Per-voxel 3D embeddings shaped ``(3, H, W, D)`` on a volume grid."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InvalidChannelError(f"embedding map must be shaped (3, H, W, D), got {self.data.shape}")
        self.spacing = _f32(_triple(self.spacing, "spacing"))
        self.origin = _f32(_triple(self.origin, "origin"))
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]  # type: ignore[return-value]

    def index_to_mm(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def mm_to_index(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMap):
            return NotImplemented
        return (
            np.array_equal(self.data, other.data)
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


def _sidecar_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".raw", ".meta"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".raw"), path.with_name(path.name + ".meta")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_array(
    data: np.ndarray,
    path,
    spacing: Sequence[float],
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    dtype: str = "int16",
) -> None:
    """Write a 3D array as a ``.raw`` + ``.meta`` sidecar pair."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    raw_path, meta_path = _sidecar_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(data.astype(_DTYPES[dtype], copy=False)).tobytes(order="C")
    meta = {
        "shape": [int(n) for n in data.shape],
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "dtype": dtype,
    }
    _atomic_write(raw_path, payload)
    _atomic_write(meta_path, (json.dumps(meta, indent=2) + "\n").encode("utf-8"))


def _read_meta(meta_path: Path) -> dict:
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{meta_path}: unreadable metadata ({exc})") from exc
    if not isinstance(meta, dict):
        raise HeaderError(f"{meta_path}: metadata must be a key-value document")
    for key in ("shape", "spacing_mm", "origin_mm", "dtype"):
        if key not in meta:
            raise HeaderError(f"{meta_path}: missing key {key!r}")
    if meta["dtype"] not in _DTYPES:
        raise HeaderError(f"{meta_path}: unsupported dtype {meta['dtype']!r}")
    for key in ("shape", "spacing_mm", "origin_mm"):
        if not isinstance(meta[key], list) or len(meta[key]) != 3:
            raise HeaderError(f"{meta_path}: {key} must be a list of 3 numbers")
    if not all(isinstance(n, int) and n >= 1 for n in meta["shape"]):
        raise HeaderError(f"{meta_path}: shape must hold positive integers")
    return meta


def load_array(path, expected_dtype: str | None = None) -> tuple[np.ndarray, dict]:
    raw_path, meta_path = _sidecar_paths(path)
    for p in (raw_path, meta_path):
        if not p.exists():
            raise MissingFileError(f"missing file {p}")
    meta = _read_meta(meta_path)
    if expected_dtype is not None and meta["dtype"] != expected_dtype:
        raise HeaderError(f"{meta_path}: expected dtype {expected_dtype!r}, found {meta['dtype']!r}")
    np_dtype = np.dtype(_DTYPES[meta["dtype"]])
    payload = raw_path.read_bytes()
    n_expected = int(np.prod(meta["shape"]))
    if len(payload) != n_expected * np_dtype.itemsize:
        raise ShapeMismatchError(
            f"{raw_path}: header declares shape {tuple(meta['shape'])} ({n_expected} voxels) "
            f"but payload holds {len(payload) / np_dtype.itemsize:g} voxels"
        )
    data = np.frombuffer(payload, dtype=np_dtype).reshape(meta["shape"]).astype(np_dtype.newbyteorder("="))
    return data, meta


def save_volume(v: Volume, path) -> None:
    save_array(v.data, path, v.spacing, v.origin, dtype="int16")


def load_volume(path) -> Volume:
    data, meta = load_array(path, expected_dtype="int16")
    try:
        return Volume(data, tuple(meta["spacing_mm"]), tuple(meta["origin_mm"]))
    except ValueError as exc:
        raise HeaderError(f"{path}: {exc}") from exc


def save_embedding_map(m: EmbeddingMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _EMB_HEADER.pack(_EMB_MAGIC, _EMB_VERSION, *m.shape, *m.spacing, *m.origin)
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes(order="C")
    _atomic_write(path, header + payload)


def load_embedding_map(path) -> EmbeddingMap:
    """Read an ``APEM`` file.

    Channel count is not stored explicitly; a payload whose size implies a
    channel count other than 3 raises :class:`InvalidChannelError`.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file {path}")
    blob = path.read_bytes()
    if len(blob) < _EMB_HEADER.size:
        raise HeaderError(f"{path}: truncated header")
    magic, version, h, w, d, *rest = _EMB_HEADER.unpack_from(blob)
    if magic != _EMB_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != _EMB_VERSION:
        raise HeaderError(f"{path}: unsupported version {version}")
    if min(h, w, d) < 1:
        raise HeaderError(f"{path}: invalid dims {(h, w, d)}")
    spacing, origin = rest[:3], rest[3:]
    payload = blob[_EMB_HEADER.size:]
    n_vox = h * w * d
    n_vals, remainder = divmod(len(payload), 4)
    if remainder:
        raise ShapeMismatchError(f"{path}: payload is not a whole number of float32 values")
    if n_vals % n_vox:
        raise ShapeMismatchError(f"{path}: payload of {n_vals} values does not match dims {(h, w, d)}")
    channels = n_vals // n_vox
    if channels != 3:
        raise InvalidChannelError(f"{path}: payload implies {channels} channels, expected 3")
    data = np.frombuffer(payload, dtype="<f4").reshape(3, h, w, d).astype(np.float32)
    return EmbeddingMap(data, tuple(spacing), tuple(origin))


class CropResult(NamedTuple):
    volume: Volume
    offset: tuple[int, int, int]
    empty: bool


def foreground_crop(v: Volume, threshold: float = -500.0) -> CropResult:
    """Crop to the bounding box of voxels strictly brighter than ``threshold``.

    Uses the raw threshold bounding box (no connected-component filtering).
    When nothing exceeds the threshold the input is returned unchanged with
    ``empty=True`` and a :class:`RuntimeWarning`.
    """
    fg = v.data > threshold
    if not fg.any():
        warnings.warn(f"no voxel above {threshold} HU; skipping foreground crop", RuntimeWarning, stacklevel=2)
        return CropResult(v, (0, 0, 0), True)
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]) + 1)
    data = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
    origin = tuple(o + i * s for o, i, s in zip(v.origin, lo, v.spacing))
    return CropResult(Volume(data, v.spacing, origin), tuple(lo), False)
