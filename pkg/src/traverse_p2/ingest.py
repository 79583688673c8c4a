"""File I/O and per-location dense-cloud accumulation.

Formats
-------
``PCB1`` point clouds (little-endian)::

    b"PCB1" | u32 count | count x (f32 x, f32 y, f32 z, f32 intensity)

Pose text files, one record per line, ``#`` comments allowed::

    frame_id tx ty tz qw qx qy qz arclength

Manifest (JSON)::

    {
      "origin_offset": [x, y, z],
      "traversals": [
        {"traversal_id": 0, "poses": "t0/poses.txt",
         "frames": ["t0/f00000.pcb", ...]},
        ...
      ],
      "locations": [0.0, 2.0, ...]          # optional
    }

Frame file ``i`` of a traversal pairs with pose record ``i``.  Relative paths
resolve against the manifest's directory.  ``origin_offset`` is subtracted
from every pose translation at load time.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .core import DenseCloud, Frame, PointCloud, Pose6DoF, Traversal, transform_to_global
from .errors import (
    BadMagic,
    MalformedRecord,
    ManifestEmpty,
    ManifestError,
    NoFramesInWindow,
    NonFinitePoint,
    NonMonotonicArclength,
    TruncatedFile,
)

PCB_MAGIC = b"PCB1"
_PCB_HEADER = struct.Struct("<4sI")
_PCB_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("i", "<f4")])


@dataclass(frozen=True)
class AccumulationConfig:
    spacing_m: float = 2.0
    window_hm: float = 20.0

    def __post_init__(self):
        if not self.spacing_m > 0:
            raise ValueError(f"spacing_m must be > 0, got {self.spacing_m}")
        if not self.window_hm > 0:
            raise ValueError(f"window_hm must be > 0, got {self.window_hm}")
        if self.window_hm < self.spacing_m / 2:
            raise ValueError(
                f"window_hm ({self.window_hm}) must be >= spacing_m / 2 ({self.spacing_m / 2})"
            )


# -- point clouds ------------------------------------------------------------


def encode_point_cloud(cloud: PointCloud, origin_offset=(0.0, 0.0, 0.0)) -> bytes:
    n = len(cloud)
    rec = np.empty(n, dtype=_PCB_RECORD)
    local = cloud.points - np.asarray(origin_offset, dtype=np.float64)
    rec["x"], rec["y"], rec["z"] = local[:, 0], local[:, 1], local[:, 2]
    rec["i"] = cloud.intensity if cloud.intensity is not None else 0.0
    return _PCB_HEADER.pack(PCB_MAGIC, n) + rec.tobytes()


def decode_point_cloud(buf: bytes, origin_offset=(0.0, 0.0, 0.0), path="<bytes>") -> PointCloud:
    if len(buf) < 4:
        raise TruncatedFile(path, len(buf), 4 - len(buf))
    if buf[:4] != PCB_MAGIC:
        raise BadMagic(path, bytes(buf[:4]), PCB_MAGIC, 0)
    if len(buf) < _PCB_HEADER.size:
        raise TruncatedFile(path, len(buf), _PCB_HEADER.size - len(buf))
    _, n = _PCB_HEADER.unpack_from(buf, 0)
    need = _PCB_HEADER.size + n * _PCB_RECORD.itemsize
    if len(buf) < need:
        raise TruncatedFile(path, len(buf), need - len(buf))
    rec = np.frombuffer(buf, dtype=_PCB_RECORD, count=n, offset=_PCB_HEADER.size)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    finite = np.isfinite(xyz).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise NonFinitePoint(path, _PCB_HEADER.size + bad * _PCB_RECORD.itemsize, bad)
    xyz += np.asarray(origin_offset, dtype=np.float64)
    return PointCloud(xyz, rec["i"].astype(np.float64))


def write_point_cloud(path, cloud: PointCloud, origin_offset=(0.0, 0.0, 0.0)) -> None:
    Path(path).write_bytes(encode_point_cloud(cloud, origin_offset))


def load_point_cloud(path, origin_offset=(0.0, 0.0, 0.0)) -> PointCloud:
    return decode_point_cloud(Path(path).read_bytes(), origin_offset, path=str(path))


# -- poses -------------------------------------------------------------------


def load_poses(path, origin_offset=(0.0, 0.0, 0.0)):
    """Read a pose file into a list of ``(frame_id, Pose6DoF, arclength)``."""
    origin = np.asarray(origin_offset, dtype=np.float64)
    out = []
    last_arc = -math.inf
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 9:
                raise MalformedRecord(path, line_no, f"expected 9 fields, got {len(parts)}")
            try:
                frame_id = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise MalformedRecord(path, line_no, str(exc)) from None
            if frame_id < 0 or not all(math.isfinite(v) for v in vals):
                raise MalformedRecord(path, line_no, "negative frame id or non-finite value")
            try:
                pose = Pose6DoF(np.array(vals[0:3]) - origin, np.array(vals[3:7]))
            except ValueError as exc:
                raise MalformedRecord(path, line_no, str(exc)) from None
            arc = vals[7]
            if arc < last_arc:
                raise NonMonotonicArclength(
                    f"{path}:{line_no}: arclength {arc} < previous {last_arc}"
                )
            last_arc = arc
            out.append((frame_id, pose, arc))
    return out


def format_pose_record(frame_id, pose: Pose6DoF, arclength, origin_offset=(0.0, 0.0, 0.0)) -> str:
    t = pose.translation + np.asarray(origin_offset, dtype=np.float64)
    vals = [*t, *pose.rotation, arclength]
    return f"{frame_id} " + " ".join(repr(float(v)) for v in vals)


def write_poses(path, records, origin_offset=(0.0, 0.0, 0.0)) -> None:
    lines = ["# frame_id tx ty tz qw qx qy qz arclength"]
    lines += [format_pose_record(fid, pose, arc, origin_offset) for fid, pose, arc in records]
    Path(path).write_text("\n".join(lines) + "\n")


# -- manifest ----------------------------------------------------------------


@dataclass
class TraversalEntry:
    traversal_id: int
    frames: List[Path]
    poses: Path


@dataclass
class DatasetManifest:
    origin_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    traversals: List[TraversalEntry] = field(default_factory=list)
    locations: Optional[List[float]] = None
    root: Path = Path(".")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    root = path.parent
    trav = doc.get("traversals") or []
    if not trav:
        raise ManifestEmpty(f"{path}: manifest lists no traversals")
    entries, seen = [], set()
    for item in trav:
        try:
            tid = int(item["traversal_id"])
            frames = [root / f for f in item["frames"]]
            poses = root / item["poses"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: bad traversal entry {item!r}: {exc}") from None
        if tid in seen:
            raise ManifestError(f"{path}: duplicate traversal_id {tid}")
        seen.add(tid)
        for f in [poses, *frames]:
            if not f.exists():
                raise ManifestError(f"{path}: referenced file {f} does not exist")
        entries.append(TraversalEntry(tid, frames, poses))
    origin = np.asarray(doc.get("origin_offset", [0.0, 0.0, 0.0]), dtype=np.float64).reshape(3)
    locations = doc.get("locations")
    if locations is not None:
        locations = [float(v) for v in locations]
    return DatasetManifest(origin, entries, locations, root)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent

    def rel(p):
        p = Path(p)
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return str(p)

    doc = {
        "origin_offset": [float(v) for v in manifest.origin_offset],
        "traversals": [
            {
                "traversal_id": e.traversal_id,
                "poses": rel(e.poses),
                "frames": [rel(f) for f in e.frames],
            }
            for e in manifest.traversals
        ],
    }
    if manifest.locations is not None:
        doc["locations"] = [float(v) for v in manifest.locations]
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_traversal(entry: TraversalEntry, origin_offset=(0.0, 0.0, 0.0)) -> Traversal:
    """Pair frame files with pose records.  Point coordinates are sensor-frame,
    so only the pose translations are shifted by the origin offset."""
    records = load_poses(entry.poses, origin_offset)
    if len(records) != len(entry.frames):
        raise ManifestError(
            f"traversal {entry.traversal_id}: {len(entry.frames)} frame files "
            f"but {len(records)} pose records"
        )
    frames = [
        Frame(fid, load_point_cloud(path), pose, arc)
        for path, (fid, pose, arc) in zip(entry.frames, records)
    ]
    return Traversal(entry.traversal_id, frames)


def load_traversals(manifest: DatasetManifest) -> List[Traversal]:
    return [load_traversal(e, manifest.origin_offset) for e in manifest.traversals]


# -- accumulation ------------------------------------------------------------


def accumulate_dense(traversal: Traversal, location_l: float, cfg: AccumulationConfig) -> DenseCloud:
    lo, hi = location_l - cfg.window_hm, location_l + cfg.window_hm
    chosen = [f for f in traversal.frames if lo <= f.arclength <= hi]
    if not chosen:
        raise NoFramesInWindow(
            f"traversal {traversal.traversal_id} has no frames in [{lo}, {hi}]"
        )
    cloud = PointCloud.concatenate([transform_to_global(f.cloud, f.pose) for f in chosen])
    return DenseCloud(
        traversal.traversal_id, float(location_l), cloud, tuple(f.frame_id for f in chosen)
    )


def locations_for_route(traversals: Sequence[Traversal], cfg: AccumulationConfig) -> List[float]:
    if not traversals:
        raise ValueError("need at least one traversal")
    start = min(float(t.arclengths.min()) for t in traversals)
    stop = max(float(t.arclengths.max()) for t in traversals)
    # small slack so 0, 2, ..., 10 includes 10 despite rounding in the division
    n = int(math.floor((stop - start) / cfg.spacing_m + 1e-9)) + 1
    return [start + i * cfg.spacing_m for i in range(n)]


def nearest_location(locations: Sequence[float], arclength: float) -> float:
    locs = np.asarray(locations, dtype=np.float64)
    return float(locs[int(np.argmin(np.abs(locs - arclength)))])


def dense_filename(traversal_id: int, location: float) -> str:
    return f"dense_t{traversal_id}_l{int(round(location * 1000))}.pcb"


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep the first point of every occupied voxel.  Optional post-step."""
    if voxel <= 0:
        raise ValueError("voxel must be > 0")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    inten = cloud.intensity[first] if cloud.intensity is not None else None
    return PointCloud(cloud.points[first], inten)
