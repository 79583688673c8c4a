"""Voxel-quantized historical feature store.

Each traversal's dense cloud is reduced to one feature vector per occupied
voxel, the per-traversal grids are merged voxel by voxel, and any point in
space can then be looked up.  Voxel keys are global: ``floor(p / voxel_size)``.

``SQF1`` store format (little-endian)::

    b"SQF1" | f64 voxel_size | 6 x f64 bounds (lo xyz, hi xyz) | u32 d | u32 count
    count x (3 x i32 key, d x f32 features)      # sorted by key

Stores hold float32 features so the file round-trip is exact.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DenseCloud, PointCloud, as_points
from .errors import BadMagic, EmptyAfterCropping, SpecMismatch, TruncatedFile

SQF_MAGIC = b"SQF1"
_SQF_HEADER = struct.Struct("<4sd6dII")

FEATURE_NAMES = (
    "log1p_count",
    "mean_dz",
    "std_z",
    "mean_intensity",
    "subvoxel_occupancy",
    "mean_radial",
    "min_dz",
    "max_dz",
)
HANDCRAFTED_DIM = len(FEATURE_NAMES)


@dataclass(frozen=True)
class VoxelGridSpec:
    voxel_size: float
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or not all(h > l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate bounds {lo} .. {hi}")
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_clouds(cls, clouds: Sequence, voxel_size: float = 0.5) -> "VoxelGridSpec":
        """Bounds snapped to the voxel lattice around all clouds, padded one voxel."""
        pts = [_points(c) for c in clouds]
        pts = [p for p in pts if p.shape[0]]
        if not pts:
            raise EmptyAfterCropping("cannot derive grid bounds from empty clouds")
        allp = np.concatenate(pts)
        lo = (np.floor(allp.min(axis=0) / voxel_size) - 1) * voxel_size
        hi = (np.floor(allp.max(axis=0) / voxel_size) + 2) * voxel_size
        return cls(voxel_size, tuple(lo), tuple(hi))

    def key_range(self):
        """Inclusive integer key bounds covered by the grid."""
        lo = np.floor(np.array(self.lo) / self.voxel_size).astype(np.int64)
        hi = np.ceil(np.array(self.hi) / self.voxel_size).astype(np.int64) - 1
        return lo, hi

    def keys_of(self, points) -> np.ndarray:
        return np.floor(as_points(points) / self.voxel_size).astype(np.int64)

    def contains(self, points) -> np.ndarray:
        p = as_points(points)
        return np.all((p >= np.array(self.lo)) & (p < np.array(self.hi)), axis=1)


@dataclass(frozen=True)
class VoxelFeatures:
    """Sparse voxel -> feature-vector map. Keys are sorted lexicographically."""

    spec: VoxelGridSpec
    keys: np.ndarray
    features: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.int64).reshape(-1, 3)
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] != keys.shape[0]:
            raise ValueError(f"features shape {feats.shape} does not match {keys.shape[0]} keys")
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        keys, feats = keys[order], feats[order]
        if keys.shape[0] > 1 and np.any(np.all(keys[1:] == keys[:-1], axis=1)):
            raise ValueError("duplicate voxel keys")
        keys.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self):
        return int(self.keys.shape[0])

    def as_dict(self):
        return {tuple(int(v) for v in k): f for k, f in zip(self.keys, self.features)}

    def _packed(self, keys):
        # packed over the occupied key extent, which preserves lexicographic order
        klo, khi = self.keys.min(axis=0), self.keys.max(axis=0)
        dims = khi - klo + 1
        rel = keys - klo
        inside = np.all((rel >= 0) & (rel < dims), axis=1)
        packed = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
        return packed, inside

    def lookup(self, keys) -> np.ndarray:
        """Row index of each key in ``self.keys``, -1 where unoccupied."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        out = np.full(keys.shape[0], -1, dtype=np.int64)
        if len(self) == 0 or keys.shape[0] == 0:
            return out
        own, _ = self._packed(self.keys)  # lexicographic order == packed order
        packed, inside = self._packed(keys)
        pos = np.searchsorted(own, packed)
        pos = np.minimum(pos, own.shape[0] - 1)
        hit = inside & (own[pos] == packed)
        out[hit] = pos[hit]
        return out


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, DenseCloud):
        return cloud.points.points
    if isinstance(cloud, PointCloud):
        return cloud.points
    return as_points(cloud)


def _intensity(cloud, n) -> np.ndarray:
    if isinstance(cloud, DenseCloud):
        cloud = cloud.points
    if isinstance(cloud, PointCloud) and cloud.intensity is not None:
        return cloud.intensity
    return np.zeros(n)


def handcrafted_features(points: np.ndarray, intensity: np.ndarray, voxel_size: float):
    """Per-voxel statistics. Returns ``(keys, features)`` with keys sorted.

    Offsets are measured from the voxel center.
    """
    keys = np.floor(points / voxel_size).astype(np.int64)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    m = uniq.shape[0]
    center = (uniq + 0.5) * voxel_size
    off = points - center[inv]
    dz = off[:, 2]

    def vsum(values):
        return np.bincount(inv, weights=values, minlength=m)

    n = counts.astype(np.float64)
    mean_dz = vsum(dz) / n
    var_z = np.maximum(vsum((dz - mean_dz[inv]) ** 2) / n, 0.0)
    mean_int = vsum(intensity) / n
    radial = np.sqrt(np.einsum("ij,ij->i", off, off))
    mean_rad = vsum(radial) / n

    min_dz = np.full(m, np.inf)
    max_dz = np.full(m, -np.inf)
    np.minimum.at(min_dz, inv, dz)
    np.maximum.at(max_dz, inv, dz)

    # which of the 8 half-voxel octants each point falls in
    octant = (off >= 0).astype(np.int64) @ np.array([4, 2, 1])
    occupied = np.zeros((m, 8), dtype=bool)
    occupied[inv, octant] = True
    occupancy = occupied.sum(axis=1) / 8.0

    feats = np.stack(
        [np.log1p(n), mean_dz, np.sqrt(var_z), mean_int, occupancy, mean_rad, min_dz, max_dz],
        axis=1,
    )
    return uniq, feats


Featurizer = Callable[[np.ndarray, np.ndarray, float], tuple]


def featurize_traversal(
    dense, spec: VoxelGridSpec, featurizer: Optional[Featurizer] = None
) -> VoxelFeatures:
    """Featurize one traversal's dense cloud on ``spec``'s grid.

    Points outside the grid bounds are dropped; the number dropped is kept on
    the result.  ``featurizer`` may replace the handcrafted statistics.
    """
    pts = _points(dense)
    inten = _intensity(dense, pts.shape[0])
    inside = spec.contains(pts)
    dropped = int(pts.shape[0] - inside.sum())
    pts, inten = pts[inside], inten[inside]
    if pts.shape[0] == 0:
        raise EmptyAfterCropping(f"no points inside grid bounds ({dropped} dropped)")
    keys, feats = (featurizer or handcrafted_features)(pts, inten, spec.voxel_size)
    return VoxelFeatures(spec, keys, feats, dropped)


def aggregate(per_traversal: Sequence[VoxelFeatures], mode: str = "mean") -> VoxelFeatures:
    """Merge per-traversal grids voxel by voxel ('mean' or 'max').

    The mean runs over the traversals that occupy the voxel, not over all T.
    """
    if not per_traversal:
        raise ValueError("aggregate needs at least one input")
    mode = mode.lower()
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    spec, d = per_traversal[0].spec, per_traversal[0].dim
    for vf in per_traversal[1:]:
        if vf.spec != spec or vf.dim != d:
            raise SpecMismatch(f"grid {vf.spec}/d={vf.dim} differs from {spec}/d={d}")
    keys = np.concatenate([vf.keys for vf in per_traversal])
    feats = np.concatenate([vf.features for vf in per_traversal]).astype(np.float64)
    if keys.shape[0] == 0:
        return VoxelFeatures(spec, keys, np.zeros((0, d), dtype=np.float32))
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    if mode == "mean":
        acc = np.zeros((uniq.shape[0], d))
        np.add.at(acc, inv, feats)
        acc /= np.bincount(inv, minlength=uniq.shape[0])[:, None]
    else:
        acc = np.full((uniq.shape[0], d), -np.inf)
        np.maximum.at(acc, inv, feats)
    return VoxelFeatures(spec, uniq, acc.astype(np.float32))


def query_points(store: VoxelFeatures, points) -> np.ndarray:
    """``(n, d + 1)`` rows: the containing voxel's features plus an occupancy flag.

    Unoccupied voxels give zeros with flag 0.
    """
    pts = as_points(points)
    rows = store.lookup(store.spec.keys_of(pts))
    out = np.zeros((pts.shape[0], store.dim + 1), dtype=np.float64)
    hit = rows >= 0
    out[hit, : store.dim] = store.features[rows[hit]]
    out[hit, store.dim] = 1.0
    return out


def query_point(store: VoxelFeatures, q) -> np.ndarray:
    return query_points(store, np.asarray(q, dtype=np.float64).reshape(1, 3))[0]


def stack_features(stores: Sequence[VoxelFeatures]) -> VoxelFeatures:
    """Concatenate several stores on the same grid into one wider store.

    A voxel missing from one input contributes zeros for that input's block.
    """
    spec = stores[0].spec
    for s in stores[1:]:
        if s.spec != spec:
            raise SpecMismatch("cannot stack stores on different grids")
    keys = np.unique(np.concatenate([s.keys for s in stores]), axis=0)
    blocks = []
    for s in stores:
        rows = s.lookup(keys)
        block = np.zeros((keys.shape[0], s.dim), dtype=np.float32)
        block[rows >= 0] = s.features[rows[rows >= 0]]
        blocks.append(block)
    return VoxelFeatures(spec, keys, np.concatenate(blocks, axis=1))


# -- SQF1 --------------------------------------------------------------------


def encode_store(store: VoxelFeatures) -> bytes:
    d = store.dim
    rec = np.dtype([("key", "<i4", (3,)), ("f", "<f4", (d,))])
    if np.any(np.abs(store.keys) > np.iinfo(np.int32).max):
        raise ValueError("voxel key exceeds int32 range of the SQF1 format")
    arr = np.empty(len(store), dtype=rec)
    arr["key"] = store.keys
    arr["f"] = store.features
    head = _SQF_HEADER.pack(
        SQF_MAGIC, store.spec.voxel_size, *store.spec.lo, *store.spec.hi, d, len(store)
    )
    return head + arr.tobytes()


def decode_store(buf: bytes, path="<bytes>") -> VoxelFeatures:
    if len(buf) < 4 or buf[:4] != SQF_MAGIC:
        raise BadMagic(path, bytes(buf[:4]), SQF_MAGIC, 0)
    if len(buf) < _SQF_HEADER.size:
        raise TruncatedFile(path, len(buf), _SQF_HEADER.size - len(buf))
    _, vs, *rest = _SQF_HEADER.unpack_from(buf, 0)
    lo, hi, d, n = rest[0:3], rest[3:6], rest[6], rest[7]
    rec = np.dtype([("key", "<i4", (3,)), ("f", "<f4", (d,))])
    need = _SQF_HEADER.size + n * rec.itemsize
    if len(buf) < need:
        raise TruncatedFile(path, len(buf), need - len(buf))
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=_SQF_HEADER.size)
    keys = arr["key"].astype(np.int64).reshape(n, 3)
    feats = arr["f"].reshape(n, d).astype(np.float32)
    return VoxelFeatures(VoxelGridSpec(vs, lo, hi), keys, feats)


def save_store(store: VoxelFeatures, path) -> None:
    Path(path).write_bytes(encode_store(store))


def load_store(path) -> VoxelFeatures:
    return decode_store(Path(path).read_bytes(), path=str(path))
