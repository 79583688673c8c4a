"""Synthetic repeated traversals with per-point ground truth.

The route runs along +x.  Every traversal re-samples the same static world
(ground plane, roadside buildings and poles) and adds ephemeral objects
(cars, pedestrians) that exist only in their assigned traversals.  Surfaces
are sampled with stratified jitter, one point per cell of area
``1 / density``, so per-traversal neighbor counts of static points are nearly
equal.  There is no occlusion model.

Frame ``i`` sits at arclength ``i * frame_spacing`` and records the points
whose x lies in ``[s_i, s_i + frame_spacing)``, expressed in its sensor frame.
Recorded poses may be perturbed by localization noise; the geometry is not.
Random streams for layout, surface sampling and pose noise are independent,
so changing the noise level leaves the sampled world untouched.
"""

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .core import Frame, PointCloud, Pose6DoF, Traversal, inverse
from .errors import LengthMismatch
from .ingest import (
    AccumulationConfig,
    DatasetManifest,
    TraversalEntry,
    accumulate_dense,
    write_manifest,
    write_point_cloud,
    write_poses,
)
from .labels import OrientedBox, save_labels
from .p2 import P2Config, P2Result, compute_p2

CAR_DIMS = (4.5, 1.9, 1.6)
PEDESTRIAN_DIMS = (0.7, 0.7, 1.7)
POLE_DIMS = (0.3, 0.3, 4.0)
SENSOR_INTENSITY = 0.5
_PLACEMENT_MARGIN = 1.0
_MAX_JITTER = 0.4


@dataclass(frozen=True)
class SceneSpec:
    route_length: float = 60.0
    frame_spacing: float = 2.0
    num_traversals: int = 5
    ground_half_width: float = 12.0
    road_half_width: float = 5.5
    num_static: int = 10
    num_cars: int = 10
    num_pedestrians: int = 6
    density: float = 50.0  # points per square meter of surface
    presence_k: int = 1  # traversals each ephemeral object appears in
    ephemeral_jitter: float = 0.3  # per-traversal position stdev (m), clipped
    ephemeral_clearance: float = 0.4  # gap between ground and ephemeral boxes
    sensor_noise: float = 0.02
    loc_noise_trans: float = 0.0
    loc_noise_yaw: float = 0.0
    sensor_height: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if self.num_traversals < 2:
            raise ValueError("num_traversals must be >= 2")
        if not 1 <= self.presence_k <= self.num_traversals:
            raise ValueError("presence_k must be in [1, num_traversals]")
        if self.density <= 0 or self.route_length <= 0 or self.frame_spacing <= 0:
            raise ValueError("density, route_length and frame_spacing must be > 0")
        for name in ("sensor_noise", "loc_noise_trans", "loc_noise_yaw", "ephemeral_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class GroundTruth:
    """``ephemeral[(traversal_id, frame_id)]`` is a bool per frame point."""

    ephemeral: Dict[Tuple[int, int], np.ndarray]
    boxes: Dict[int, List[OrientedBox]]

    def labels_for(self, traversal_id: int, frame_ids: Sequence[int]) -> np.ndarray:
        parts = [self.ephemeral[(traversal_id, f)] for f in frame_ids]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


class _Object(NamedTuple):
    x: float
    y: float
    yaw: float
    dims: tuple
    label: str


# -- surface sampling --------------------------------------------------------


def _sample_rect(rng, origin, u, v, density):
    """Stratified samples on the parallelogram origin + a*u + b*v, a, b in [0, 1)."""
    lu, lv = np.linalg.norm(u), np.linalg.norm(v)
    nu = max(1, int(round(lu * math.sqrt(density))))
    nv = max(1, int(round(lv * math.sqrt(density))))
    a = (np.arange(nu)[:, None] + rng.random((nu, nv))) / nu
    b = (np.arange(nv)[None, :] + rng.random((nu, nv))) / nv
    return origin + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v


def _sample_box(rng, box: OrientedBox, density):
    """Four sides and the top; the underside is not visible to the sensor."""
    l, w, h = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ex = np.array([c, s, 0.0]) * l
    ey = np.array([-s, c, 0.0]) * w
    ez = np.array([0.0, 0.0, h])
    base = np.array(box.center) - ex / 2 - ey / 2 - ez / 2
    faces = [
        (base, ex, ez),
        (base + ey, ex, ez),
        (base, ey, ez),
        (base + ex, ey, ez),
        (base + ez, ex, ey),
    ]
    return np.concatenate([_sample_rect(rng, o, u, v, density) for o, u, v in faces])


# -- scene generation --------------------------------------------------------


def _place(rng, placed, dims, x_range, y_ranges, attempts=2000):
    radius = 0.5 * math.hypot(dims[0], dims[1])
    for _ in range(attempts):
        x = rng.uniform(*x_range)
        lo, hi = y_ranges[rng.integers(len(y_ranges))]
        y = rng.uniform(lo, hi)
        ok = all(
            math.hypot(x - o.x, y - o.y)
            >= radius + 0.5 * math.hypot(o.dims[0], o.dims[1]) + _PLACEMENT_MARGIN
            for o in placed
        )
        if ok:
            return x, y
    return None


def _layout(spec: SceneSpec, rng):
    static, ephemeral = [], []
    L, G, R = spec.route_length, spec.ground_half_width, spec.road_half_width
    for _ in range(spec.num_static):
        if rng.random() < 0.3:
            dims, label = POLE_DIMS, "Pole"
        else:
            dims = (rng.uniform(3, 6), rng.uniform(2, 3.5), rng.uniform(3, 6))
            label = "Building"
        half = 0.5 * math.hypot(dims[0], dims[1])
        y_band = (R + 1.0 + half, max(R + 1.0 + half, G - half))
        pos = _place(rng, static, dims, (half, L - half), [y_band, (-y_band[1], -y_band[0])])
        if pos is not None:
            static.append(_Object(pos[0], pos[1], rng.uniform(-0.2, 0.2), dims, label))
    kinds = [(CAR_DIMS, "Car")] * spec.num_cars + [(PEDESTRIAN_DIMS, "Pedestrian")] * spec.num_pedestrians
    for dims, label in kinds:
        half = 0.5 * math.hypot(dims[0], dims[1])
        band = (-R + half, R - half)
        pos = _place(rng, static + ephemeral, dims, (half, L - half), [band])
        if pos is not None:
            yaw = rng.uniform(-0.3, 0.3) + (math.pi if rng.random() < 0.5 else 0.0)
            ephemeral.append(_Object(pos[0], pos[1], yaw, dims, label))
    presence = [
        set(rng.choice(spec.num_traversals, size=spec.presence_k, replace=False).tolist())
        for _ in ephemeral
    ]
    return static, ephemeral, presence


def _static_box(o: _Object) -> OrientedBox:
    return OrientedBox((o.x, o.y, o.dims[2] / 2), o.dims, o.yaw, 1.0, o.label)


def generate_scene(spec: SceneSpec):
    """Returns ``(traversals, truth)``; bit-identical for equal specs."""
    layout_ss, sample_ss, pose_ss = np.random.SeedSequence(spec.seed).spawn(3)
    static, ephemeral, presence = _layout(spec, np.random.default_rng(layout_ss))
    sample_rngs = [np.random.default_rng(s) for s in sample_ss.spawn(spec.num_traversals)]
    pose_rngs = [np.random.default_rng(s) for s in pose_ss.spawn(spec.num_traversals)]

    L, G = spec.route_length, spec.ground_half_width
    n_frames = max(1, int(math.floor(L / spec.frame_spacing + 1e-9)))
    traversals, labels, boxes = [], {}, {}
    for t in range(spec.num_traversals):
        rng = sample_rngs[t]
        parts = [_sample_rect(rng, np.array([0.0, -G, 0.0]), np.array([L, 0, 0.0]), np.array([0, 2 * G, 0.0]), spec.density)]
        parts += [_sample_box(rng, _static_box(o), spec.density) for o in static]
        n_static_pts = sum(p.shape[0] for p in parts)
        present = []
        for o, where in zip(ephemeral, presence):
            if t not in where:
                continue
            j = np.clip(rng.normal(0.0, spec.ephemeral_jitter, 2), -_MAX_JITTER, _MAX_JITTER)
            if spec.ephemeral_jitter == 0:
                j = np.zeros(2)
            z = spec.ephemeral_clearance + o.dims[2] / 2
            box = OrientedBox((o.x + j[0], o.y + j[1], z), o.dims, o.yaw, 1.0, o.label)
            present.append(box)
            parts.append(_sample_box(rng, box, spec.density))
        boxes[t] = present
        world = np.concatenate(parts)
        is_eph = np.zeros(world.shape[0], dtype=bool)
        is_eph[n_static_pts:] = True
        world = world + rng.normal(0.0, spec.sensor_noise, world.shape)

        lane = rng.uniform(-1.0, 1.0)
        prng = pose_rngs[t]
        slab = np.floor(world[:, 0] / spec.frame_spacing).astype(np.int64)
        frames = []
        for i in range(n_frames):
            s = i * spec.frame_spacing
            true_pose = Pose6DoF.from_xyz_yaw(s, lane, spec.sensor_height, 0.0)
            sel = slab == i
            sensor_pts = inverse(true_pose).apply(world[sel])
            dt = prng.normal(0.0, 1.0, 3) * spec.loc_noise_trans
            dyaw = prng.normal(0.0, 1.0) * spec.loc_noise_yaw
            recorded = Pose6DoF.from_xyz_yaw(s + dt[0], lane + dt[1], spec.sensor_height + dt[2], dyaw)
            cloud = PointCloud(sensor_pts, np.full(sensor_pts.shape[0], SENSOR_INTENSITY))
            frames.append(Frame(i, cloud, recorded, s))
            labels[(t, i)] = is_eph[sel]
        traversals.append(Traversal(t, frames))
    return traversals, GroundTruth(labels, boxes)


# -- evaluation --------------------------------------------------------------


class SeparationReport(NamedTuple):
    mean_static: float
    mean_ephemeral: float
    auc: float
    n_static: int
    n_ephemeral: int


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    _, first, counts = np.unique(sx, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks = np.empty(x.shape[0])
    ranks[order] = np.repeat(avg, counts)
    return ranks


def roc_auc(static_scores, ephemeral_scores) -> float:
    """P(static score > ephemeral score), ties counting one half (Mann-Whitney)."""
    a = np.asarray(static_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(ephemeral_scores, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        return math.nan
    ranks = _average_ranks(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def evaluate_separation(scores, is_ephemeral) -> SeparationReport:
    s = scores.scores if isinstance(scores, P2Result) else np.asarray(scores, dtype=np.float64)
    eph = np.asarray(is_ephemeral, dtype=bool).reshape(-1)
    if s.shape[0] != eph.shape[0]:
        raise LengthMismatch(f"{s.shape[0]} scores for {eph.shape[0]} labels")
    st, ep = s[~eph], s[eph]
    mean = lambda v: float(v.mean()) if v.size else math.nan  # noqa: E731
    return SeparationReport(mean(st), mean(ep), roc_auc(st, ep), int(st.size), int(ep.size))


@dataclass
class ScoredScene:
    location: float
    points: np.ndarray
    is_ephemeral: np.ndarray
    traversal: np.ndarray
    result: P2Result
    dense_clouds: list


def default_location(spec: SceneSpec) -> float:
    n_frames = max(1, int(math.floor(spec.route_length / spec.frame_spacing + 1e-9)))
    return (n_frames // 2) * spec.frame_spacing


def score_scene(
    traversals,
    truth: GroundTruth,
    location: Optional[float] = None,
    acc_cfg: AccumulationConfig = AccumulationConfig(),
    p2_cfg: P2Config = P2Config(),
    max_queries_per_class: int = 10000,
    margin: float = 1.0,
    seed: int = 0,
) -> ScoredScene:
    """P2 for points of every traversal's dense cloud at one location.

    Queries are restricted to x within ``window - margin`` of the location so
    that window edges, which differ between traversals, do not bias scores.
    Each class is subsampled to at most ``max_queries_per_class`` points.
    """
    if location is None:
        arcs = np.concatenate([t.arclengths for t in traversals])
        location = float(arcs[np.argmin(np.abs(arcs - np.median(arcs)))])
    dense = [accumulate_dense(t, location, acc_cfg) for t in traversals]
    pts = np.concatenate([d.points.points for d in dense])
    eph = np.concatenate([truth.labels_for(d.traversal_id, d.source_frame_ids) for d in dense])
    trav = np.concatenate([np.full(len(d), d.traversal_id) for d in dense])
    lo = max(location - acc_cfg.window_hm, min(t.arclengths.min() for t in traversals)) + margin
    hi = min(location + acc_cfg.window_hm, max(t.arclengths.max() for t in traversals)) - margin
    keep = (pts[:, 0] >= lo) & (pts[:, 0] <= hi)
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in (False, True):
        idx = np.nonzero(keep & (eph == cls))[0]
        if idx.size > max_queries_per_class:
            idx = np.sort(rng.choice(idx, size=max_queries_per_class, replace=False))
        chosen.append(idx)
    sel = np.sort(np.concatenate(chosen))
    result = compute_p2(dense, pts[sel], p2_cfg, keep_counts=True)
    return ScoredScene(location, pts[sel], eph[sel], trav[sel], result, dense)


def run_pipeline(spec: SceneSpec, p2_cfg: P2Config = P2Config(), acc_cfg: AccumulationConfig = AccumulationConfig(), **kw):
    """Generate, score at the route midpoint, and evaluate."""
    traversals, truth = generate_scene(spec)
    scored = score_scene(traversals, truth, default_location(spec), acc_cfg, p2_cfg, **kw)
    return evaluate_separation(scored.result, scored.is_ephemeral), scored


class SweepRow(NamedTuple):
    param: float
    seed: int
    auc: float
    mean_static: float
    mean_ephemeral: float


def sweep_traversals(spec: SceneSpec, T_values, seeds=None, **kw) -> List[SweepRow]:
    rows = []
    for T in T_values:
        if T < 2:
            raise ValueError("every T must be >= 2")
        for seed in seeds if seeds is not None else [spec.seed]:
            rep, _ = run_pipeline(replace(spec, num_traversals=int(T), seed=int(seed)), **kw)
            rows.append(SweepRow(T, int(seed), rep.auc, rep.mean_static, rep.mean_ephemeral))
    return rows


def sweep_localization_noise(spec: SceneSpec, noise_values, seeds=None, **kw) -> List[SweepRow]:
    rows = []
    for noise in noise_values:
        if noise < 0:
            raise ValueError("noise must be >= 0")
        for seed in seeds if seeds is not None else [spec.seed]:
            s = replace(spec, loc_noise_trans=float(noise), seed=int(seed))
            rep, _ = run_pipeline(s, **kw)
            rows.append(SweepRow(noise, int(seed), rep.auc, rep.mean_static, rep.mean_ephemeral))
    return rows


def median_by_param(rows: Sequence[SweepRow]):
    """``[(param, median AUC)]`` in first-seen parameter order."""
    params = list(dict.fromkeys(r.param for r in rows))
    return [(p, float(np.median([r.auc for r in rows if r.param == p]))) for p in params]


def write_sweep_csv(path, rows: Sequence[SweepRow], param_name: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param_name, "seed", "auc", "mean_tau_static", "mean_tau_ephemeral"])
        for r in rows:
            w.writerow([r.param, r.seed, repr(r.auc), repr(r.mean_static), repr(r.mean_ephemeral)])


# -- on-disk scenes ----------------------------------------------------------


def write_scene(out_dir, traversals, truth: GroundTruth, origin_offset=(0.0, 0.0, 0.0)) -> Path:
    """Write frames (PCB1), pose files, truth and a manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    truth_arrays = {}
    for trav in traversals:
        tdir = out / f"t{trav.traversal_id}"
        tdir.mkdir(exist_ok=True)
        paths = []
        for f in trav.frames:
            p = tdir / f"f{f.frame_id:05d}.pcb"
            write_point_cloud(p, f.cloud)
            paths.append(p)
            truth_arrays[f"t{trav.traversal_id}_f{f.frame_id}"] = truth.ephemeral[
                (trav.traversal_id, f.frame_id)
            ].astype(np.uint8)
        pose_path = tdir / "poses.txt"
        write_poses(pose_path, [(f.frame_id, f.pose, f.arclength) for f in trav.frames], origin_offset)
        entries.append(TraversalEntry(trav.traversal_id, paths, pose_path))
        save_labels(truth.boxes.get(trav.traversal_id, []), tdir / "ephemeral_boxes.txt")
    with open(out / "truth.npz", "wb") as fh:
        np.savez(fh, **truth_arrays)
    manifest_path = out / "manifest.json"
    write_manifest(manifest_path, DatasetManifest(np.asarray(origin_offset, dtype=np.float64), entries, None, out))
    return manifest_path


def load_truth(path) -> Dict[Tuple[int, int], np.ndarray]:
    out = {}
    with np.load(path) as z:
        for name in z.files:
            t, f = name[1:].split("_f")
            out[(int(t), int(f))] = z[name].astype(bool)
    return out
