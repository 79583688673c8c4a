"""Oriented boxes and the persistence filter for pseudo-labels.

A box survives when the nearest-rank 20th percentile of its points' P2
scores is strictly below 0.7: boxes made mostly of persistent background are
likely false positives.

Label files hold one box per line, ``#`` comments allowed::

    class cx cy cz length width height yaw score
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence

import numpy as np

from .core import PointCloud, as_points
from .errors import EmptyInput, LengthMismatch, MalformedRecord

TOO_PERSISTENT = "TooPersistent"
TOO_FEW_POINTS = "TooFewPoints"
PERCENTILE_ESTIMATOR = "nearest-rank"


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2 * math.pi)
    return math.pi if y == -math.pi else y


@dataclass(frozen=True)
class OrientedBox:
    center: tuple
    dims: tuple  # length (along heading), width, height
    yaw: float
    score: float = 1.0
    label: str = "Car"

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        d = tuple(float(v) for v in self.dims)
        if len(c) != 3 or len(d) != 3:
            raise ValueError("center and dims need 3 components")
        if not all(v > 0 for v in d):
            raise ValueError(f"box dims must be positive, got {d}")
        if not all(math.isfinite(v) for v in (*c, *d, self.yaw, self.score)):
            raise ValueError("box values must be finite")
        if any(ch.isspace() for ch in self.label) or not self.label:
            raise ValueError(f"class label must be a non-empty word, got {self.label!r}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "score", float(self.score))

    def to_local(self, points) -> np.ndarray:
        """Express global points in the box frame."""
        p = as_points(points) - np.array(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * p[:, 0] + s * p[:, 1]
        y = -s * p[:, 0] + c * p[:, 1]
        return np.stack([x, y, p[:, 2]], axis=1)

    def corners(self) -> np.ndarray:
        l, w, h = self.dims
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        local = signs * np.array([l, w, h]) / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.array(self.center)


@dataclass(frozen=True)
class FilterConfig:
    percentile: float = 0.20
    threshold: float = 0.7
    min_points: int = 1

    def __post_init__(self):
        if not 0 < self.percentile < 1:
            raise ValueError(f"percentile must be in (0, 1), got {self.percentile}")
        if self.min_points < 0:
            raise ValueError("min_points must be >= 0")


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)


def points_in_box(box: OrientedBox, cloud) -> np.ndarray:
    """Ascending indices of points inside the box, faces included."""
    local = box.to_local(_points(cloud))
    half = np.array(box.dims) / 2
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.nonzero(inside)[0]


def percentile_nearest_rank(values, fraction: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.shape[0] == 0:
        raise EmptyInput("percentile of an empty sample")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rank = math.ceil(fraction * v.shape[0])
    return float(v[max(rank, 1) - 1])


class Rejection(NamedTuple):
    box_index: int
    reason: str
    percentile_value: float  # nan when the box had too few points
    num_points: int


def filter_pseudo_labels(boxes: Sequence[OrientedBox], cloud, scores, cfg: FilterConfig = FilterConfig()):
    """Split boxes into ``(kept, rejected)``; rejected entries carry a reason."""
    pts = _points(cloud)
    tau = np.asarray(scores, dtype=np.float64).reshape(-1)
    if tau.shape[0] != pts.shape[0]:
        raise LengthMismatch(f"{tau.shape[0]} scores for {pts.shape[0]} points")
    kept, rejected = [], []
    for i, box in enumerate(boxes):
        idx = points_in_box(box, pts)
        if idx.shape[0] < max(cfg.min_points, 1):
            rejected.append(Rejection(i, TOO_FEW_POINTS, math.nan, int(idx.shape[0])))
            continue
        value = percentile_nearest_rank(tau[idx], cfg.percentile)
        if value < cfg.threshold:
            kept.append(box)
        else:
            rejected.append(Rejection(i, TOO_PERSISTENT, value, int(idx.shape[0])))
    return kept, rejected


def write_rejection_report(path, rejected: Sequence[Rejection], cfg: FilterConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# estimator={PERCENTILE_ESTIMATOR} percentile={cfg.percentile!r} "
            f"threshold={cfg.threshold!r} min_points={cfg.min_points}\n"
        )
        w = csv.writer(fh)
        w.writerow(["box_id", "reason", "percentile_value", "num_points"])
        for r in rejected:
            w.writerow([r.box_index, r.reason, repr(r.percentile_value), r.num_points])


# -- label files -------------------------------------------------------------


def format_box(box: OrientedBox) -> str:
    vals = [*box.center, *box.dims, box.yaw, box.score]
    return box.label + " " + " ".join(repr(float(v)) for v in vals)


def save_labels(boxes: Sequence[OrientedBox], path) -> None:
    lines = ["# class cx cy cz length width height yaw score"]
    lines += [format_box(b) for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_labels(path) -> List[OrientedBox]:
    boxes = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 9:
                raise MalformedRecord(path, line_no, f"expected 9 fields, got {len(parts)}")
            try:
                v = [float(p) for p in parts[1:]]
                boxes.append(OrientedBox(tuple(v[0:3]), tuple(v[3:6]), v[6], v[7], parts[0]))
            except ValueError as exc:
                raise MalformedRecord(path, line_no, str(exc)) from None
    return boxes
