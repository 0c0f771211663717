"""Point/box geometry types and the on-disk drive format.

A drive on disk is a directory of ``<name>.bin`` clouds (flat little-endian
float32 records, KITTI velodyne layout) plus one JSON manifest listing every
frame's cloud file, timestamp and ground-truth boxes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import FormatError, IoFailure

log = logging.getLogger(__name__)

_DTYPE = np.dtype("<f4")
BASE_ARITY = 4  # x, y, z, intensity


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float
    temporal_flag: int | None = None


def normalize_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y < 0:
        y += 2.0 * math.pi
    y -= math.pi
    return math.pi if y <= -math.pi else y


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    class_id: int = 0
    confidence: float | None = None

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"non-finite box parameter in {vals}")
        if min(self.l, self.w, self.h) <= 0:
            raise FormatError(f"box dimensions must be positive, got {(self.l, self.w, self.h)}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise FormatError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    def corners_bev(self) -> np.ndarray:
        """Footprint corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("cx", "cy", "cz", "l", "w", "h", "yaw", "class_id")}
        if self.confidence is not None:
            d["confidence"] = self.confidence
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        try:
            return cls(
                float(d["cx"]), float(d["cy"]), float(d["cz"]),
                float(d["l"]), float(d["w"]), float(d["h"]),
                float(d.get("yaw", 0.0)), int(d.get("class_id", 0)),
                None if d.get("confidence") is None else float(d["confidence"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid box record {d!r}: {exc}") from exc


# Predictions are boxes that carry a confidence.
Detection = Box3D


class PointCloud:
    """An ordered set of points stored as a float32 array of shape (n, 4) or (n, 5).

    Column 4, when present, is the temporal flag (an integer stored as float).
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray | Sequence[Sequence[float]] | None = None, with_flag: bool = False):
        arity = BASE_ARITY + int(with_flag)
        if data is None:
            arr = np.zeros((0, arity), dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=np.float32)
            if arr.size == 0:
                arr = arr.reshape(0, arr.shape[1] if arr.ndim == 2 else arity)
        if arr.ndim != 2 or arr.shape[1] not in (BASE_ARITY, BASE_ARITY + 1):
            raise FormatError(f"point array must be (n, 4) or (n, 5), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise FormatError("point cloud contains non-finite values")
        inten = arr[:, 3]
        if ((inten < 0) | (inten > 1)).any():
            raise FormatError("intensity outside [0, 1]")
        if arr.shape[1] == 5:
            flags = arr[:, 4]
            if ((flags < 0) | (flags != np.round(flags))).any():
                raise FormatError("temporal flags must be non-negative integers")
        self.data = np.ascontiguousarray(arr)

    @property
    def has_flag(self) -> bool:
        return self.data.shape[1] == BASE_ARITY + 1

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def flags(self) -> np.ndarray | None:
        return self.data[:, 4].astype(np.int64) if self.has_flag else None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __iter__(self) -> Iterator[Point]:
        for row in self.data:
            flag = int(row[4]) if self.has_flag else None
            yield Point(float(row[0]), float(row[1]), float(row[2]), float(row[3]), flag)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, with_flag={self.has_flag})"

    @classmethod
    def from_points(cls, points: Sequence[Point]) -> "PointCloud":
        if not points:
            return cls()
        flagged = {p.temporal_flag is not None for p in points}
        if len(flagged) != 1:
            raise FormatError("mixed presence of temporal_flag across points")
        if flagged.pop():
            return cls([tuple(p) for p in points], with_flag=True)
        return cls([tuple(p)[:4] for p in points])


@dataclass(frozen=True)
class FrameRecord:
    cloud_path: Path
    timestamp: float
    boxes: tuple[Box3D, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise FormatError(f"timestamp must be finite and non-negative, got {self.timestamp}")


def read_cloud(path: str | Path, with_flag: bool = False) -> PointCloud:
    """Decode a ``.bin`` cloud. Intensities outside [0, 1] are clamped with a warning."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    arity = BASE_ARITY + int(with_flag)
    stride = arity * _DTYPE.itemsize
    if len(raw) % stride:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of record size {stride}")
    arr = np.frombuffer(raw, dtype=_DTYPE).reshape(-1, arity).astype(np.float32)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite values")
    inten = arr[:, 3]
    n_bad = int(((inten < 0) | (inten > 1)).sum())
    if n_bad:
        log.warning("%s: clamped %d intensities into [0, 1]", path, n_bad)
        np.clip(inten, 0.0, 1.0, out=inten)
    return PointCloud(arr, with_flag=with_flag)


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    path = Path(path)
    if not np.isfinite(cloud.data).all():
        raise FormatError("refusing to write non-finite points")
    try:
        path.write_bytes(cloud.data.astype(_DTYPE, copy=False).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _parse_frame(entry, base: Path, i: int) -> FrameRecord:
    if not isinstance(entry, dict) or "cloud" not in entry or "t" not in entry:
        raise FormatError(f"manifest entry {i} must be an object with 'cloud' and 't'")
    if not isinstance(entry["cloud"], str) or isinstance(entry["t"], bool):
        raise FormatError(f"manifest entry {i}: bad field types")
    try:
        t = float(entry["t"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"manifest entry {i}: t is not a number") from exc
    boxes = entry.get("boxes", [])
    if not isinstance(boxes, list):
        raise FormatError(f"manifest entry {i}: boxes must be a list")
    cloud = Path(entry["cloud"])
    if not cloud.is_absolute():
        cloud = base / cloud
    return FrameRecord(cloud, t, tuple(Box3D.from_dict(b) for b in boxes))


def read_manifest(path: str | Path) -> list[FrameRecord]:
    """Load a drive manifest; timestamps must be strictly increasing."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    records = [_parse_frame(e, path.parent, i) for i, e in enumerate(doc)]
    for a, b in zip(records, records[1:]):
        if not b.timestamp > a.timestamp:
            raise FormatError(
                f"{path}: timestamps must be strictly increasing ({a.timestamp} then {b.timestamp})"
            )
    return records


def write_manifest(records: Sequence[FrameRecord], path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    doc = []
    for r in records:
        cloud = Path(r.cloud_path)
        try:
            cloud = cloud.resolve().relative_to(base)
        except ValueError:
            pass
        doc.append({"cloud": str(cloud), "t": r.timestamp, "boxes": [b.to_dict() for b in r.boxes]})
    try:
        path.write_text(json.dumps(doc, indent=1))
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc
