"""Volumetric containers, the ``.scv`` on-disk format and seeded random streams.

A ``.scv`` volume is two files: ``<name>.scv`` holds exactly ``4*D*H*W``
bytes of little-endian float32 samples in C order (z slowest), and
``<name>.scv.json`` holds the header::

    {"kind": "projection", "dims": [D, H, W], "dtype": "f32le",
     "order": "zyx", "spacing": [dz, dh, dw], "geometry": {...}}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import CorruptionError, FormatError, ParameterError, ValidationError

_MASK64 = (1 << 64) - 1


def _as_samples(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if arr.ndim != 3:
        raise ValidationError(f"volume data must be 3D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"volume dims must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("volume contains non-finite samples")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProjectionVolume:
    """Stack of post-log sinograms, shape (slices, views, detectors)."""

    data: np.ndarray
    geometry: Optional["ScanGeometry"] = None  # noqa: F821
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_samples(self.data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        g = self.geometry
        if g is not None:
            _, h, w = self.data.shape
            if g.view_count != h or g.detector_count != w:
                raise ValidationError(
                    f"geometry ({g.view_count} views, {g.detector_count} dets) "
                    f"does not match data shape {self.data.shape}"
                )

    kind = "projection"

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace_data(self, data) -> "ProjectionVolume":
        return ProjectionVolume(data, self.geometry, self.spacing)


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Stack of attenuation images, shape (slices, rows, cols)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_samples(self.data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    kind = "image"

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace_data(self, data) -> "ImageVolume":
        return ImageVolume(data, self.spacing)


Volume = Union[ProjectionVolume, ImageVolume]


@dataclass(frozen=True)
class PatchBlock:
    center: Tuple[int, int, int]
    edge: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.edge < 1 or self.edge % 2 == 0:
            raise ParameterError(f"block edge must be odd and positive, got {self.edge}")
        if self.values.size != self.edge**3:
            raise ValidationError("block values must hold edge**3 samples")

    def cube(self) -> np.ndarray:
        return self.values.reshape((self.edge,) * 3)


@dataclass(frozen=True)
class RandomSource:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Every call to :meth:`generator` restarts the stream from draw 0, so two
    sources with equal keys always produce the same sequence regardless of
    which thread asks for it.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = (self.seed & _MASK64) | ((self.stream_id & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RandomSource":
        # Distinct children of one parent never collide with each other.
        return RandomSource(self.seed, (self.stream_id * 1_000_003 + stream_id + 1) & _MASK64)


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _normalize(path) -> Path:
    path = Path(path)
    if path.suffix != ".scv":
        path = path.with_name(path.name + ".scv")
    return path


def save_volume(v: Volume, path) -> Path:
    """Write ``v`` as ``<path>.scv`` + ``<path>.scv.json``; returns the payload path."""
    data = np.asarray(v.data)
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValidationError(f"cannot save volume with dims {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("refusing to save a volume with non-finite samples")
    path = _normalize(path)
    header = {
        "kind": v.kind,
        "dims": [int(d) for d in data.shape],
        "dtype": "f32le",
        "order": "zyx",
        "spacing": [float(s) for s in v.spacing],
    }
    geometry = getattr(v, "geometry", None)
    if geometry is not None:
        header["geometry"] = geometry.to_json()
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes(order="C")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    _header_path(path).write_text(json.dumps(header, indent=2))
    return path


def load_volume(path) -> Volume:
    path = _normalize(path)
    hpath = _header_path(path)
    if not hpath.exists():
        raise FormatError(f"missing header {hpath}")
    try:
        header = json.loads(hpath.read_text())
        kind = header["kind"]
        dims = tuple(int(d) for d in header["dims"])
        dtype = header["dtype"]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed header {hpath}: {exc}") from exc
    if dtype != "f32le" or header.get("order", "zyx") != "zyx":
        raise FormatError(f"unsupported dtype/order in {hpath}")
    if kind not in ("projection", "image") or len(dims) != 3:
        raise FormatError(f"bad kind or dims in {hpath}")
    raw = path.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise CorruptionError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    spacing = tuple(header.get("spacing", (1.0, 1.0, 1.0)))
    if kind == "image":
        return ImageVolume(data, spacing)
    geometry = None
    if header.get("geometry") is not None:
        from .geometry import ScanGeometry

        geometry = ScanGeometry.from_json(header["geometry"])
    return ProjectionVolume(data, geometry, spacing)


def as_array(v) -> np.ndarray:
    """The sample array of a volume, or ``v`` itself as an array."""
    if isinstance(v, (ProjectionVolume, ImageVolume)):
        return v.data
    return np.asarray(v)


def _check_center(shape, center, n):
    if n < 1 or n % 2 == 0:
        raise ParameterError(f"block edge must be odd and positive, got {n}")
    if len(center) != 3 or any(not 0 <= c < s for c, s in zip(center, shape)):
        raise ParameterError(f"center {center} outside volume of shape {shape}")


def extract_block(v, center, n: int) -> PatchBlock:
    """Sample the n**3 cube around ``center`` with clamped-edge replication."""
    data = as_array(v)
    _check_center(data.shape, center, n)
    r = n // 2
    idx = [np.clip(np.arange(c - r, c + r + 1), 0, s - 1) for c, s in zip(center, data.shape)]
    values = data[np.ix_(*idx)].reshape(-1).copy()
    return PatchBlock(tuple(int(c) for c in center), n, values)


def insert_block(data: np.ndarray, block: PatchBlock) -> None:
    """Write ``block`` back into ``data`` in place (in-bounds positions only)."""
    r = block.edge // 2
    cube = block.cube()
    sl_dst, sl_src = [], []
    for c, s in zip(block.center, data.shape):
        lo, hi = c - r, c + r + 1
        sl_dst.append(slice(max(lo, 0), min(hi, s)))
        sl_src.append(slice(max(lo, 0) - lo, block.edge - (hi - min(hi, s))))
    data[tuple(sl_dst)] = cube[tuple(sl_src)]
