"""Command-line frontend: ``traverse-p2 <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 I/O error, otherwise the
``exit_code`` of the raised :class:`~traverse_p2.errors.TraverseError`.
Every run writes ``run_meta.txt`` with all effective parameters.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .align import (
    MlpSpec,
    TrainConfig,
    build_alignment_dataset,
    save_mlp,
    train_head,
)
from .core import PointCloud, inverse
from .errors import ConfigError, NoFramesInWindow, TooFewTraversals, TraverseError
from .ingest import (
    AccumulationConfig,
    accumulate_dense,
    dense_filename,
    load_manifest,
    load_point_cloud,
    load_poses,
    load_traversals,
    locations_for_route,
    nearest_location,
    write_point_cloud,
    write_poses,
)
from .labels import (
    PERCENTILE_ESTIMATOR,
    FilterConfig,
    filter_pseudo_labels,
    load_labels,
    save_labels,
    write_rejection_report,
)
from .p2 import P2Config, compute_p2, load_scores, score_histogram, write_scores
from .squash import FEATURE_NAMES, VoxelGridSpec, aggregate, featurize_traversal, save_store


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--manifest", type=Path, help="dataset manifest (JSON)")
    g.add_argument("--out", type=Path, default=Path("."), help="output directory")
    g.add_argument("--threads", type=int, default=0, help="kernel threads, 0 = auto")
    g.add_argument("--seed", type=int, default=0)

    acc = argparse.ArgumentParser(add_help=False)
    a = acc.add_argument_group("accumulation")
    a.add_argument("--spacing", type=float, default=2.0, help="location spacing m (meters)")
    a.add_argument("--window", type=float, default=20.0, help="half window H_m (meters)")
    a.add_argument("--dense-dir", type=Path, help="directory of dense clouds (default: --out)")
    a.add_argument("--location", type=float, help="route arclength of the location to use")

    parser = argparse.ArgumentParser(prog="traverse-p2", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("accumulate", parents=[common, acc], help="build dense clouds per location")

    p = sub.add_parser("p2", parents=[common, acc], help="P2 scores for a scan")
    p.add_argument("--scan", type=Path, required=True, help="PCB1 scan")
    p.add_argument("--scan-pose", type=Path, help="pose file (one record) placing the scan")
    p.add_argument("--radius", type=float, default=0.3)

    p = sub.add_parser("featurize", parents=[common, acc], help="voxel feature store per location")
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.add_argument("--agg", choices=["mean", "max"], default="mean")

    p = sub.add_parser("train-head", parents=[common, acc], help="train the P2 regression head")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--radius", type=float, default=0.3)
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.add_argument("--agg", choices=["mean", "max"], default="mean")
    p.add_argument("--max-queries", type=int, default=20000)
    p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("filter", parents=[common], help="filter pseudo-labels by persistence")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--cloud", type=Path, required=True, help="PCB1 points in the label frame")
    p.add_argument("--scores", type=Path, required=True, help="P2S1 scores for --cloud")
    p.add_argument("--percentile", type=float, default=0.20)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--min-points", type=int, default=1)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic repeated-traversal dataset")
    p.add_argument("--route-length", type=float, default=60.0)
    p.add_argument("--frame-spacing", type=float, default=2.0)
    p.add_argument("--traversals", type=int, default=5)
    p.add_argument("--density", type=float, default=50.0)
    p.add_argument("--static", type=int, default=10)
    p.add_argument("--cars", type=int, default=10)
    p.add_argument("--pedestrians", type=int, default=6)
    p.add_argument("--presence-k", type=int, default=1)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--sensor-noise", type=float, default=0.02)
    p.add_argument("--loc-noise", type=float, default=0.0)
    p.add_argument("--loc-noise-yaw", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=0.3, help="radius for --evaluate and sweeps")
    p.add_argument("--evaluate", action="store_true", help="write separation.csv")
    p.add_argument("--sweep-traversals", type=_floats, help="comma list of T values")
    p.add_argument("--sweep-noise", type=_floats, help="comma list of pose noise stdevs")
    p.add_argument("--sweep-seeds", type=int, default=1)

    p = sub.add_parser("bench", parents=[common], help="index vs brute-force radius counting")
    p.add_argument("--points", type=int, default=1_000_000)
    p.add_argument("--queries", type=int, default=10_000)
    p.add_argument("--radius", type=float, default=0.3)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--brute-queries", type=int, default=200)
    return parser


def _write_meta(out: Path, args, extra=None):
    meta = {k: v for k, v in vars(args).items()}
    meta["backend"] = _accel.BACKEND
    meta["version"] = __version__
    meta.update(extra or {})
    lines = [f"{k}={'' if v is None else v}" for k, v in sorted(meta.items())]
    (out / "run_meta.txt").write_text("\n".join(lines) + "\n")


def _prepare_out(args):
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _need_manifest(args):
    if args.manifest is None:
        raise ConfigError(f"{args.command} requires --manifest")
    return load_manifest(args.manifest)


def _acc_cfg(args):
    try:
        return AccumulationConfig(args.spacing, args.window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _locations(manifest, traversals, cfg):
    if manifest.locations is not None:
        return list(manifest.locations)
    return locations_for_route(traversals, cfg)


def _dense_for_location(args, location, cfg):
    """Dense clouds for one location: from --dense-dir if present, else accumulated."""
    dense_dir = args.dense_dir or args.out
    clouds, missing = [], False
    manifest = load_manifest(args.manifest) if args.manifest else None
    if manifest is not None:
        tids = [e.traversal_id for e in manifest.traversals]
        for tid in tids:
            path = dense_dir / dense_filename(tid, location)
            if not path.exists():
                missing = True
                break
            clouds.append(load_point_cloud(path))
        if missing:
            clouds = []
            for trav in load_traversals(manifest):
                try:
                    clouds.append(accumulate_dense(trav, location, cfg).points)
                except NoFramesInWindow:
                    pass
    else:
        tag = f"_l{int(round(location * 1000))}.pcb"
        for path in sorted(dense_dir.glob(f"dense_t*{tag}")):
            clouds.append(load_point_cloud(path))
    return clouds


def _resolve_location(args, cfg, arclength=None):
    want = args.location if args.location is not None else arclength
    if args.manifest:
        manifest = load_manifest(args.manifest)
        locs = _locations(manifest, load_traversals(manifest), cfg)
        if want is None:
            return locs[len(locs) // 2]
        return nearest_location(locs, want)
    if want is None:
        raise ConfigError("give --location or --manifest")
    return float(want)


# -- subcommands -------------------------------------------------------------


def cmd_accumulate(args):
    out = _prepare_out(args)
    cfg = _acc_cfg(args)
    manifest = _need_manifest(args)
    traversals = load_traversals(manifest)
    locations = _locations(manifest, traversals, cfg)
    if args.location is not None:
        locations = [nearest_location(locations, args.location)]
    rows = []
    for trav in traversals:
        for loc in locations:
            try:
                dense = accumulate_dense(trav, loc, cfg)
            except NoFramesInWindow:
                rows.append([trav.traversal_id, repr(loc), 0, 0, ""])
                continue
            name = dense_filename(trav.traversal_id, loc)
            write_point_cloud(out / name, dense.points)
            rows.append([trav.traversal_id, repr(loc), len(dense.source_frame_ids), len(dense), name])
    with open(out / "accumulate_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traversal_id", "location", "num_frames", "num_points", "file"])
        w.writerows(rows)
    _write_meta(out, args, {"num_locations": len(locations)})
    return 0


def cmd_p2(args):
    out = _prepare_out(args)
    cfg = _acc_cfg(args)
    try:
        p2_cfg = P2Config(args.radius)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    scan = load_point_cloud(args.scan)
    arclength = None
    if args.scan_pose is not None:
        records = load_poses(args.scan_pose)
        if len(records) != 1:
            raise ConfigError(f"{args.scan_pose}: expected exactly one pose record")
        _, pose, arclength = records[0]
        scan = PointCloud(pose.apply(scan.points), scan.intensity)
    location = _resolve_location(args, cfg, arclength)
    clouds = _dense_for_location(args, location, cfg)
    if len(clouds) < p2_cfg.min_traversals:
        raise TooFewTraversals(f"{len(clouds)} dense clouds at location {location}")
    result = compute_p2(clouds, scan.points, p2_cfg)
    write_scores(out / "p2_scores.p2s", result.scores)
    counts, edges = score_histogram(result.scores)
    with open(out / "p2_histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    _write_meta(out, args, {"resolved_location": location, "num_traversals": len(clouds), "log_base": "e"})
    return 0


def cmd_featurize(args):
    out = _prepare_out(args)
    cfg = _acc_cfg(args)
    if args.location is not None or not args.manifest:
        locations = [_resolve_location(args, cfg)]
    else:
        manifest = load_manifest(args.manifest)
        locations = _locations(manifest, load_traversals(manifest), cfg)
    written = 0
    for loc in locations:
        clouds = _dense_for_location(args, loc, cfg)
        if not clouds:
            continue
        spec = VoxelGridSpec.from_clouds(clouds, args.voxel_size)
        per = [featurize_traversal(c, spec) for c in clouds]
        save_store(aggregate(per, args.agg), out / f"squash_l{int(round(loc * 1000))}.sqf")
        written += 1
    _write_meta(out, args, {"stores_written": written, "features": ",".join(FEATURE_NAMES)})
    return 0


def cmd_train_head(args):
    out = _prepare_out(args)
    cfg = _acc_cfg(args)
    try:
        train_cfg = TrainConfig(args.lr, args.batch, args.epochs, args.momentum, args.seed)
        p2_cfg = P2Config(args.radius)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    location = _resolve_location(args, cfg)
    clouds = _dense_for_location(args, location, cfg)
    if len(clouds) < p2_cfg.min_traversals:
        raise TooFewTraversals(f"{len(clouds)} dense clouds at location {location}")
    pts = np.concatenate([c.points for c in clouds])
    rng = np.random.default_rng(args.seed)
    if pts.shape[0] > args.max_queries:
        pts = pts[np.sort(rng.choice(pts.shape[0], args.max_queries, replace=False))]
    targets = compute_p2(clouds, pts, p2_cfg).scores
    dataset, store = build_alignment_dataset(
        clouds, pts, targets, args.voxel_size, args.agg, args.val_fraction, args.seed
    )
    mlp, history = train_head(dataset, MlpSpec.for_input(dataset.dim, seed=args.seed), train_cfg)
    save_mlp(mlp, out / "head.mlp")
    save_store(store, out / "align_store.sqf")
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_l1", "val_l1"])
        for row in history:
            w.writerow([row.epoch, repr(row.train_l1), repr(row.val_l1)])
    _write_meta(out, args, {"resolved_location": location, "widths": ",".join(map(str, mlp.widths))})
    return 0


def cmd_filter(args):
    out = _prepare_out(args)
    try:
        cfg = FilterConfig(args.percentile, args.threshold, args.min_points)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    boxes = load_labels(args.labels)
    cloud = load_point_cloud(args.cloud)
    scores = load_scores(args.scores)
    kept, rejected = filter_pseudo_labels(boxes, cloud, scores, cfg)
    save_labels(kept, out / "kept_labels.txt")
    write_rejection_report(out / "rejection_report.csv", rejected, cfg)
    _write_meta(out, args, {"estimator": PERCENTILE_ESTIMATOR, "kept": len(kept), "rejected": len(rejected)})
    return 0


def cmd_simulate(args):
    from .sim import (
        SceneSpec,
        default_location,
        evaluate_separation,
        generate_scene,
        median_by_param,
        score_scene,
        sweep_localization_noise,
        sweep_traversals,
        write_scene,
        write_sweep_csv,
    )

    out = _prepare_out(args)
    try:
        spec = SceneSpec(
            route_length=args.route_length,
            frame_spacing=args.frame_spacing,
            num_traversals=args.traversals,
            num_static=args.static,
            num_cars=args.cars,
            num_pedestrians=args.pedestrians,
            density=args.density,
            presence_k=args.presence_k,
            ephemeral_jitter=args.jitter,
            sensor_noise=args.sensor_noise,
            loc_noise_trans=args.loc_noise,
            loc_noise_yaw=args.loc_noise_yaw,
            seed=args.seed,
        )
        p2_cfg = P2Config(args.radius)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    traversals, truth = generate_scene(spec)
    write_scene(out, traversals, truth)

    # sample scan: the last traversal's dense window at the route midpoint,
    # expressed in the sensor frame of the frame at that location
    trav = traversals[-1]
    loc = default_location(spec)
    frame = min(trav.frames, key=lambda f: abs(f.arclength - loc))
    dense = accumulate_dense(trav, frame.arclength, AccumulationConfig())
    scan_pts = inverse(frame.pose).apply(dense.points.points)
    write_point_cloud(out / "scan.pcb", PointCloud(scan_pts, dense.points.intensity))
    write_poses(out / "scan_pose.txt", [(frame.frame_id, frame.pose, frame.arclength)])
    write_point_cloud(out / "scan_global.pcb", dense.points)
    np.save(out / "scan_truth.npy", truth.labels_for(trav.traversal_id, dense.source_frame_ids))
    save_labels(truth.boxes[trav.traversal_id], out / "scan_boxes.txt")

    extra = {"scan_traversal": trav.traversal_id, "scan_frame": frame.frame_id}
    if args.evaluate:
        scored = score_scene(traversals, truth, default_location(spec), p2_cfg=p2_cfg, seed=args.seed)
        rep = evaluate_separation(scored.result, scored.is_ephemeral)
        with open(out / "separation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mean_tau_static", "mean_tau_ephemeral", "auc", "n_static", "n_ephemeral"])
            w.writerow([repr(rep.mean_static), repr(rep.mean_ephemeral), repr(rep.auc), rep.n_static, rep.n_ephemeral])
    seeds = list(range(args.seed, args.seed + args.sweep_seeds))
    if args.sweep_traversals:
        rows = sweep_traversals(spec, [int(v) for v in args.sweep_traversals], seeds, p2_cfg=p2_cfg)
        write_sweep_csv(out / "sweep_traversals.csv", rows, "num_traversals")
        extra["median_auc_by_T"] = median_by_param(rows)
    if args.sweep_noise:
        rows = sweep_localization_noise(spec, args.sweep_noise, seeds, p2_cfg=p2_cfg)
        write_sweep_csv(out / "sweep_noise.csv", rows, "loc_noise_trans")
        extra["median_auc_by_noise"] = median_by_param(rows)
    _write_meta(out, args, extra)
    return 0


def cmd_bench(args):
    from .bench import format_result, run_benchmark

    out = _prepare_out(args)
    res = run_benchmark(
        args.points, args.queries, args.radius, args.cell_size, args.brute_queries, seed=args.seed
    )
    print(format_result(res))
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(res._fields)
        w.writerow(list(res))
    # timings vary run to run, so they stay out of run_meta
    _write_meta(out, args, {"counts_agree": res.counts_agree})
    return 0


COMMANDS = {
    "accumulate": cmd_accumulate,
    "p2": cmd_p2,
    "featurize": cmd_featurize,
    "train-head": cmd_train_head,
    "filter": cmd_filter,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    _accel.set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except TraverseError as exc:
        print(f"traverse-p2 {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"traverse-p2 {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
