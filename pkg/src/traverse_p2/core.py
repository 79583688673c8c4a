"""Geometry and container types shared by the whole pipeline.

Points are stored as ``(N, 3)`` float64 arrays.  Quaternions use (w, x, y, z)
order everywhere, including every file format.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def as_points(points) -> np.ndarray:
    """Coerce array-like input to a contiguous ``(N, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    return arr


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.sqrt(np.dot(q, q))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q}")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


@dataclass(frozen=True)
class Pose6DoF:
    """Rigid transform from a sensor frame into the global frame."""

    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t}")
        t.setflags(write=False)
        q = quat_normalize(self.rotation)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls) -> "Pose6DoF":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_xyz_yaw(cls, x, y, z, yaw) -> "Pose6DoF":
        return cls(np.array([x, y, z]), quat_from_yaw(yaw))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_homogeneous(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        return pts @ self.matrix.T + self.translation

    def allclose(self, other: "Pose6DoF", atol=1e-9) -> bool:
        # q and -q encode the same rotation
        same_rot = np.allclose(self.rotation, other.rotation, atol=atol) or np.allclose(
            self.rotation, -other.rotation, atol=atol
        )
        return same_rot and np.allclose(self.translation, other.translation, atol=atol)


def compose(pose_a: Pose6DoF, pose_b: Pose6DoF) -> Pose6DoF:
    """Pose equivalent to applying ``pose_b`` first, then ``pose_a``."""
    q = quat_multiply(pose_a.rotation, pose_b.rotation)
    t = pose_a.matrix @ pose_b.translation + pose_a.translation
    return Pose6DoF(t, q)


def inverse(pose: Pose6DoF) -> Pose6DoF:
    w, x, y, z = pose.rotation
    q_inv = np.array([w, -x, -y, -z])
    t_inv = -(quat_to_matrix(q_inv) @ pose.translation)
    return Pose6DoF(t_inv, q_inv)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = as_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"intensity length {inten.shape[0]} != point count {pts.shape[0]}"
                )
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return cls.empty()
        pts = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.intensity is None for c in clouds):
            return cls(pts)
        inten = np.concatenate(
            [c.intensity if c.intensity is not None else np.zeros(len(c)) for c in clouds]
        )
        return cls(pts, inten)


def transform_to_global(cloud: PointCloud, pose: Pose6DoF) -> PointCloud:
    return PointCloud(pose.apply(cloud.points), cloud.intensity)


@dataclass(frozen=True)
class Frame:
    frame_id: int
    cloud: PointCloud
    pose: Pose6DoF
    arclength: float

    def __post_init__(self):
        if self.frame_id < 0:
            raise ValueError(f"frame_id must be non-negative, got {self.frame_id}")

    def global_cloud(self) -> PointCloud:
        return transform_to_global(self.cloud, self.pose)


@dataclass(frozen=True)
class Traversal:
    traversal_id: int
    frames: tuple = field(default_factory=tuple)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.traversal_id < 0:
            raise ValueError("traversal_id must be non-negative")
        if not frames:
            raise ValueError(f"traversal {self.traversal_id} has no frames")
        ids = np.array([f.frame_id for f in frames])
        arcs = np.array([f.arclength for f in frames], dtype=np.float64)
        if np.any(np.diff(ids) <= 0):
            raise ValueError(f"traversal {self.traversal_id}: frame_ids not strictly increasing")
        if np.any(np.diff(arcs) < 0):
            raise ValueError(f"traversal {self.traversal_id}: arclength decreases")

    @property
    def arclengths(self) -> np.ndarray:
        return np.array([f.arclength for f in self.frames], dtype=np.float64)


@dataclass(frozen=True)
class DenseCloud:
    """Union of one traversal's frames around a route location, global frame."""

    traversal_id: int
    location: float
    points: PointCloud
    source_frame_ids: tuple

    def __len__(self):
        return len(self.points)
