"""Fixed-radius neighbor counting on a voxel hash grid.

The index sorts points by a packed cell key so every cell is a contiguous run
of the sorted point array.  For a fixed (x, y) cell column, the z cells of a
query's shell are also contiguous in key space, so each query needs one
binary search per column instead of one per cell.

Distances are compared squared against ``r * r`` with a strict ``<``; the
brute-force oracle uses the same arithmetic so the two agree exactly.
"""

import math
from typing import Dict, Tuple

import numpy as np

from . import _accel
from ._accel import njit, prange
from .core import PointCloud, as_points

_MAX_KEYSPACE = 2**62


def _points_of(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return as_points(cloud)


class RadiusCountIndex:
    """Immutable hash-grid index answering 'how many points within r of q'."""

    def __init__(self, points: np.ndarray, cell_size: float):
        if not cell_size > 0:
            raise ValueError(f"cell_size must be > 0, got {cell_size}")
        pts = as_points(points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("cannot index non-finite points")
        self.cell_size = float(cell_size)
        self.total_points = pts.shape[0]
        if self.total_points == 0:
            self.lo = np.zeros(3, dtype=np.int64)
            self.dims = np.ones(3, dtype=np.int64)
            self.order = np.zeros(0, dtype=np.int64)
            self.points = np.zeros((0, 3))
            self.keys = np.zeros(0, dtype=np.int64)
            self.starts = np.zeros(1, dtype=np.int64)
        else:
            cells = np.floor(pts / self.cell_size).astype(np.int64)
            self.lo = cells.min(axis=0)
            self.dims = cells.max(axis=0) - self.lo + 1
            if math.prod(int(d) for d in self.dims) >= _MAX_KEYSPACE:
                raise ValueError("point extent too large for the packed cell key")
            rel = cells - self.lo
            packed = (rel[:, 0] * self.dims[1] + rel[:, 1]) * self.dims[2] + rel[:, 2]
            self.order = np.argsort(packed, kind="stable")
            packed = packed[self.order]
            self.points = np.ascontiguousarray(pts[self.order])
            self.keys, first = np.unique(packed, return_index=True)
            self.starts = np.append(first, self.total_points).astype(np.int64)
        for arr in (self.lo, self.dims, self.order, self.points, self.keys, self.starts):
            arr.setflags(write=False)

    def __len__(self):
        return self.total_points

    @property
    def num_cells(self) -> int:
        return int(self.keys.shape[0])

    def cell_of(self, p) -> Tuple[int, int, int]:
        c = np.floor(np.asarray(p, dtype=np.float64) / self.cell_size).astype(np.int64)
        return tuple(int(v) for v in c)

    @property
    def cells(self) -> Dict[Tuple[int, int, int], np.ndarray]:
        """Map cell key ``(ix, iy, iz)`` to the ``(k, 3)`` points it holds."""
        d1, d2 = int(self.dims[1]), int(self.dims[2])
        out = {}
        for k, key in enumerate(self.keys):
            key = int(key)
            ix, rem = divmod(key, d1 * d2)
            iy, iz = divmod(rem, d2)
            cell = (ix + int(self.lo[0]), iy + int(self.lo[1]), iz + int(self.lo[2]))
            out[cell] = self.points[self.starts[k] : self.starts[k + 1]]
        return out


def build_index(cloud, cell_size: float) -> RadiusCountIndex:
    return RadiusCountIndex(_points_of(cloud), cell_size)


def _shell(r: float, cell_size: float) -> int:
    return int(math.ceil(r / cell_size))


@njit(parallel=True)
def _count_batch_numba(pts, keys, starts, lo, dims, cell_size, queries, r, shell):
    nq = queries.shape[0]
    out = np.zeros(nq, dtype=np.int64)
    r2 = r * r
    nkeys = keys.shape[0]
    for i in prange(nq):
        qx = queries[i, 0]
        qy = queries[i, 1]
        qz = queries[i, 2]
        jx0 = np.int64(np.floor(qx / cell_size)) - lo[0]
        jy0 = np.int64(np.floor(qy / cell_size)) - lo[1]
        jz0 = np.int64(np.floor(qz / cell_size)) - lo[2]
        za = max(jz0 - shell, 0)
        zb = min(jz0 + shell, dims[2] - 1)
        if za > zb:
            continue
        c = 0
        for jx in range(max(jx0 - shell, 0), min(jx0 + shell, dims[0] - 1) + 1):
            for jy in range(max(jy0 - shell, 0), min(jy0 + shell, dims[1] - 1) + 1):
                base = (jx * dims[1] + jy) * dims[2]
                k0 = np.searchsorted(keys, base + za)
                k1 = np.searchsorted(keys, base + zb, side="right")
                if k0 >= nkeys or k0 == k1:
                    continue
                for p in range(starts[k0], starts[k1]):
                    dx = pts[p, 0] - qx
                    dy = pts[p, 1] - qy
                    dz = pts[p, 2] - qz
                    if dx * dx + dy * dy + dz * dz < r2:
                        c += 1
        out[i] = c
    return out


def _count_batch_numpy(pts, keys, starts, lo, dims, cell_size, queries, r, shell, chunk=2048):
    nq = queries.shape[0]
    out = np.zeros(nq, dtype=np.int64)
    r2 = r * r
    for c0 in range(0, nq, chunk):
        q = queries[c0 : c0 + chunk]
        rel = np.floor(q / cell_size).astype(np.int64) - lo
        za = np.maximum(rel[:, 2] - shell, 0)
        zb = np.minimum(rel[:, 2] + shell, dims[2] - 1)
        counts = np.zeros(q.shape[0], dtype=np.int64)
        for ox in range(-shell, shell + 1):
            jx = rel[:, 0] + ox
            for oy in range(-shell, shell + 1):
                jy = rel[:, 1] + oy
                ok = (jx >= 0) & (jx < dims[0]) & (jy >= 0) & (jy < dims[1]) & (za <= zb)
                qi = np.nonzero(ok)[0]
                if qi.size == 0:
                    continue
                base = (jx[qi] * dims[1] + jy[qi]) * dims[2]
                k0 = np.searchsorted(keys, base + za[qi])
                k1 = np.searchsorted(keys, base + zb[qi], side="right")
                s, e = starts[k0], starts[k1]
                lens = e - s
                total = int(lens.sum())
                if total == 0:
                    continue
                owner = np.repeat(qi, lens)
                run_start = np.cumsum(lens) - lens
                pidx = np.repeat(s - run_start, lens) + np.arange(total)
                d = pts[pidx] - q[owner]
                d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
                counts += np.bincount(owner[d2 < r2], minlength=q.shape[0])
        out[c0 : c0 + chunk] = counts
    return out


def count_within_batch(index: RadiusCountIndex, queries, r: float, backend=None) -> np.ndarray:
    """Neighbor count for every query, order-preserving.

    ``backend`` overrides the process-wide choice ("numba" or "numpy").
    """
    if not r > 0:
        raise ValueError(f"radius must be > 0, got {r}")
    q = as_points(queries)
    if q.shape[0] == 0 or index.total_points == 0:
        return np.zeros(q.shape[0], dtype=np.int64)
    if not np.all(np.isfinite(q)):
        raise ValueError("queries must be finite")
    backend = backend or _accel.BACKEND
    kernel = _count_batch_numba if backend == "numba" else _count_batch_numpy
    return kernel(
        index.points,
        index.keys,
        index.starts,
        index.lo,
        index.dims,
        index.cell_size,
        q,
        float(r),
        _shell(r, index.cell_size),
    )


def count_within(index: RadiusCountIndex, q, r: float) -> int:
    return int(count_within_batch(index, as_points(q), r)[0])


def count_brute(cloud, q, r: float) -> int:
    """Linear-scan reference count of points strictly within ``r`` of ``q``."""
    if not r > 0:
        raise ValueError(f"radius must be > 0, got {r}")
    pts = _points_of(cloud)
    q = np.asarray(q, dtype=np.float64).reshape(3)
    d = pts - q
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    return int(np.count_nonzero(d2 < r * r))


def count_brute_batch(cloud, queries, r: float) -> np.ndarray:
    q = as_points(queries)
    return np.array([count_brute(cloud, qi, r) for qi in q], dtype=np.int64)
