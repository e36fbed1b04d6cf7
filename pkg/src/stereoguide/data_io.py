"""KITTI label/calibration text formats, SGMD depth rasters and result files."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .boxes import Box3D, normalize_angle
from .errors import (BadMagic, InvalidDepth, MalformedLine, MalformedMatrix, MissingKey,
                     TruncatedPayload)

DEPTH_MAGIC = b"SGMD"
_HEADER = struct.Struct("<4sII")


class Category(str, Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    DONTCARE = "DontCare"
    OTHER = "Other"

    @classmethod
    def parse(cls, name: str) -> "Category":
        try:
            return cls(name)
        except ValueError:
            return cls.OTHER


@dataclass(frozen=True)
class CalibrationSet:
    p_left: np.ndarray
    p_right: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        for name in ("p_left", "p_right"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (3, 4):
                raise MalformedMatrix(f"{name} must be 3x4, got {m.shape}")
            if not (m[0, 0] > 0 and m[1, 1] > 0) or not np.all(np.isfinite(m[:2, 2])):
                raise MalformedMatrix(f"{name} has invalid focal/principal entries")
            object.__setattr__(self, name, m)

    @property
    def baseline(self) -> float:
        """Stereo baseline in meters recovered from the two projections."""
        return float(abs(self.p_left[0, 3] - self.p_right[0, 3]) / self.p_left[0, 0])


@dataclass
class GroundTruthObject:
    """One KITTI label row; ``location`` is the bottom center in camera frame."""

    category: Category
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple
    dims: tuple  # (h, w, l)
    location: tuple  # (x, y, z)
    yaw: float

    @property
    def is_dontcare(self) -> bool:
        return self.category is Category.DONTCARE

    @property
    def height_px(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def to_box3d(self) -> Box3D:
        return camera_to_bev_box(self.location, self.dims, self.yaw)


@dataclass
class PredictionRecord:
    box: Box3D
    score: float
    category: Category = Category.CAR
    frame_id: str = ""
    bbox2d: tuple = field(default=(0.0, 0.0, 0.0, 0.0))
    alpha: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class DepthRaster:
    width: int
    height: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(self.height, self.width)

    def __eq__(self, other):
        return (isinstance(other, DepthRaster) and self.width == other.width
                and self.height == other.height
                and self.values.tobytes() == other.values.tobytes())


# ---------------------------------------------------------------------------
# frame conversion between KITTI camera coordinates and the BEV frame

def camera_to_bev_box(location, dims, yaw) -> Box3D:
    """Camera-frame bottom-center label -> BEV-frame geometric-center box."""
    x, y, z = location
    h, w, l = dims
    return Box3D(z, -x, -y + h / 2, l, w, h, normalize_angle(-yaw - math.pi / 2))


def bev_to_camera_box(box: Box3D):
    """Inverse of :func:`camera_to_bev_box`, returning (location, dims, yaw)."""
    location = (-box.y, -(box.z - box.h / 2), box.x)
    dims = (box.h, box.w, box.l)
    return location, dims, normalize_angle(-box.yaw - math.pi / 2)


def camera_points_to_bev(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.stack([p[..., 2], -p[..., 0], -p[..., 1]], axis=-1)


# ---------------------------------------------------------------------------
# labels

def _floats(parts, line_no):
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise MalformedLine(line_no, str(exc)) from None


def parse_kitti_label(text: str) -> list[GroundTruthObject]:
    objects = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 15:
            raise MalformedLine(line_no, f"expected 15 fields, got {len(parts)}")
        v = _floats(parts[1:15], line_no)
        if v[1] != int(v[1]):
            raise MalformedLine(line_no, "occlusion must be an integer")
        objects.append(GroundTruthObject(
            category=Category.parse(parts[0]),
            truncation=v[0],
            occlusion=int(v[1]),
            alpha=v[2],
            bbox2d=tuple(v[3:7]),
            dims=tuple(v[7:10]),
            location=tuple(v[10:13]),
            yaw=v[13],
        ))
    return objects


def parse_kitti_predictions(text: str, frame_id: str = "") -> list[PredictionRecord]:
    """Read a KITTI result file (label fields plus score)."""
    preds = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 16:
            raise MalformedLine(line_no, f"expected 16 fields, got {len(parts)}")
        v = _floats(parts[1:16], line_no)
        preds.append(PredictionRecord(
            box=camera_to_bev_box(v[10:13], v[7:10], v[13]),
            score=min(max(v[14], 0.0), 1.0),
            category=Category.parse(parts[0]),
            frame_id=frame_id,
            bbox2d=tuple(v[3:7]),
            alpha=v[2],
        ))
    return preds


def _f2(v) -> str:
    """Two decimals, without the "-0.00" that rounds to zero from below."""
    text = f"{v:.2f}"
    return "0.00" if text == "-0.00" else text


def serialize_predictions(preds) -> str:
    lines = []
    for p in preds:
        (x, y, z), (h, w, l), ry = bev_to_camera_box(p.box)
        alpha = p.alpha
        if alpha is None:
            alpha = normalize_angle(ry - math.atan2(x, z))
        fields = [p.category.value, "0.00", "0", _f2(alpha),
                  *(_f2(c) for c in p.bbox2d),
                  _f2(h), _f2(w), _f2(l),
                  _f2(x), _f2(y), _f2(z), _f2(ry), _f2(p.score)]
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def serialize_labels(objects) -> str:
    lines = []
    for o in objects:
        fields = [o.category.value, _f2(o.truncation), str(int(o.occlusion)),
                  _f2(o.alpha), *(_f2(c) for c in o.bbox2d),
                  *(_f2(c) for c in o.dims), *(_f2(c) for c in o.location),
                  _f2(o.yaw)]
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# calibration

def parse_kitti_calib(text: str, frame_id: str = "") -> CalibrationSet:
    mats = {}
    for line in text.splitlines():
        key, sep, rest = line.partition(":")
        if not sep:
            continue
        mats[key.strip()] = rest.split()
    found = {}
    for key in ("P2", "P3"):
        if key not in mats:
            raise MissingKey(key)
        try:
            vals = [float(v) for v in mats[key]]
        except ValueError as exc:
            raise MalformedMatrix(f"{key}: {exc}") from None
        if len(vals) != 12:
            raise MalformedMatrix(f"{key}: expected 12 numbers, got {len(vals)}")
        found[key] = np.array(vals).reshape(3, 4)
    return CalibrationSet(found["P2"], found["P3"], frame_id)


# ---------------------------------------------------------------------------
# depth rasters

def read_depth_raster(data: bytes) -> DepthRaster:
    if len(data) < _HEADER.size:
        if not DEPTH_MAGIC.startswith(bytes(data[:4])):
            raise BadMagic("not an SGMD raster")
        raise TruncatedPayload("header truncated")
    magic, width, height = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    n = width * height
    payload = memoryview(data)[_HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedPayload(f"expected {4 * n} payload bytes, got {len(payload)}")
    values = np.frombuffer(payload[:4 * n], dtype="<f4").astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(values) | (values < 0))
    if len(bad):
        raise InvalidDepth(int(bad[0]), float(values[bad[0]]))
    return DepthRaster(width, height, values)


def write_depth_raster(raster: DepthRaster) -> bytes:
    values = np.ascontiguousarray(raster.values, dtype="<f4")
    return _HEADER.pack(DEPTH_MAGIC, raster.width, raster.height) + values.tobytes()


def load_depth_raster(path) -> DepthRaster:
    return read_depth_raster(Path(path).read_bytes())


def save_depth_raster(raster: DepthRaster, path) -> None:
    Path(path).write_bytes(write_depth_raster(raster))


def read_point_cloud_text(text: str) -> np.ndarray:
    """Whitespace-separated ``x y z`` rows (camera frame)."""
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    if not rows:
        return np.zeros((0, 3))
    try:
        pts = np.array([[float(v) for v in r[:3]] for r in rows])
    except ValueError as exc:
        raise MalformedLine(0, str(exc)) from None
    if pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise MalformedLine(0, "point rows need three finite coordinates")
    return pts


def write_point_cloud_text(points: np.ndarray) -> str:
    """One ``x y z`` row per point, in the shortest text that parses back exactly."""
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(points, dtype=np.float64).tolist())
