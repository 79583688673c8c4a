"""Persistence (P2) statistics from repeated LiDAR traversals."""

__version__ = "0.1.0"

from .core import DenseCloud, Frame, PointCloud, Point3, Pose6DoF, Traversal, compose, inverse, transform_to_global
from .ingest import AccumulationConfig, accumulate_dense, locations_for_route
from .p2 import P2Config, P2Result, compute_p2, p2_score, p2_scores
from .spatial import RadiusCountIndex, build_index, count_brute, count_within, count_within_batch

__all__ = [
    "AccumulationConfig",
    "DenseCloud",
    "Frame",
    "P2Config",
    "P2Result",
    "Point3",
    "PointCloud",
    "Pose6DoF",
    "RadiusCountIndex",
    "Traversal",
    "accumulate_dense",
    "build_index",
    "compose",
    "compute_p2",
    "count_brute",
    "count_within",
    "count_within_batch",
    "inverse",
    "locations_for_route",
    "p2_score",
    "p2_scores",
    "transform_to_global",
]
