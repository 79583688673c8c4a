"""Persistency Prior (P2) scores.

For a query point q and T per-traversal dense clouds of one location, count
neighbors strictly within ``radius_r`` in each traversal, normalize the counts
into a distribution over traversals, and score q by the entropy of that
distribution divided by ln(T).  Rows with no neighbors anywhere score 0.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DenseCloud, PointCloud, as_points
from .errors import BadMagic, TooFewTraversals, TruncatedFile
from .spatial import build_index, count_within_batch

P2S_MAGIC = b"P2S1"
_P2S_HEADER = struct.Struct("<4sI")

# Returned by normalize_counts for a row whose counts are all zero.
ALL_ZERO = None


@dataclass(frozen=True)
class P2Config:
    radius_r: float = 0.3
    min_traversals: int = 2

    def __post_init__(self):
        if not self.radius_r > 0:
            raise ValueError(f"radius_r must be > 0, got {self.radius_r}")
        if self.min_traversals < 2:
            raise ValueError(f"min_traversals must be >= 2, got {self.min_traversals}")


@dataclass(frozen=True)
class P2Result:
    scores: np.ndarray
    per_traversal_counts: Optional[np.ndarray] = None


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, DenseCloud):
        return cloud.points.points
    if isinstance(cloud, PointCloud):
        return cloud.points
    return as_points(cloud)


def neighbor_counts(dense_clouds: Sequence, queries, cfg: P2Config) -> np.ndarray:
    """(num_queries, T) matrix of neighbor counts, one column per traversal."""
    T = len(dense_clouds)
    if T < cfg.min_traversals:
        raise TooFewTraversals(f"need at least {cfg.min_traversals} traversals, got {T}")
    q = _points(queries)
    out = np.zeros((q.shape[0], T), dtype=np.int64)
    for t, cloud in enumerate(dense_clouds):
        index = build_index(_points(cloud), cfg.radius_r)
        out[:, t] = count_within_batch(index, q, cfg.radius_r)
    return out


def normalize_counts(row):
    """Counts -> probability vector, or ``ALL_ZERO`` when every count is 0."""
    row = np.asarray(row, dtype=np.float64)
    total = row.sum()
    if total == 0:
        return ALL_ZERO
    return row / total


def p2_scores(counts, log=np.log) -> np.ndarray:
    """Vectorized score for a (num_queries, T) count matrix."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim == 1:
        counts = counts.reshape(1, -1)
    T = counts.shape[1]
    if T < 2:
        raise TooFewTraversals(f"score needs at least 2 traversals, got {T}")
    total = counts.sum(axis=1, keepdims=True)
    safe_total = np.where(total > 0, total, 1.0)
    p = counts / safe_total
    plogp = np.zeros_like(p)
    nz = p > 0
    plogp[nz] = p[nz] * log(p[nz])
    tau = -plogp.sum(axis=1) / log(T)
    tau[total[:, 0] == 0] = 0.0
    # clamp floating-point overshoot only; + 0.0 turns -0.0 into 0.0
    return np.clip(tau, 0.0, 1.0) + 0.0


def p2_score(row) -> float:
    return float(p2_scores(np.asarray(row).reshape(1, -1))[0])


def compute_p2(dense_clouds: Sequence, queries, cfg: P2Config, keep_counts=False) -> P2Result:
    counts = neighbor_counts(dense_clouds, queries, cfg)
    return P2Result(p2_scores(counts), counts if keep_counts else None)


# -- P2S1 score files --------------------------------------------------------


def encode_scores(scores) -> bytes:
    s = np.asarray(scores, dtype="<f4").reshape(-1)
    return _P2S_HEADER.pack(P2S_MAGIC, s.shape[0]) + s.tobytes()


def decode_scores(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != P2S_MAGIC:
        raise BadMagic(path, bytes(buf[:4]), P2S_MAGIC, 0)
    if len(buf) < _P2S_HEADER.size:
        raise TruncatedFile(path, len(buf), _P2S_HEADER.size - len(buf))
    _, n = _P2S_HEADER.unpack_from(buf, 0)
    need = _P2S_HEADER.size + 4 * n
    if len(buf) < need:
        raise TruncatedFile(path, len(buf), need - len(buf))
    return np.frombuffer(buf, dtype="<f4", count=n, offset=_P2S_HEADER.size).copy()


def write_scores(path, scores) -> None:
    Path(path).write_bytes(encode_scores(scores))


def load_scores(path) -> np.ndarray:
    return decode_scores(Path(path).read_bytes(), path=str(path))


def score_histogram(scores, bins=20):
    """Counts over ``bins`` equal bins of [0, 1]; the last bin is closed."""
    counts, edges = np.histogram(np.asarray(scores, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return counts, edges
