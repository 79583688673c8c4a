"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; the terminal summary repeats them at the end of any run.
"""

import math

import numpy as np
import pytest

from traverse_p2 import _accel
from traverse_p2.align import (
    AlignmentDataset,
    MlpSpec,
    TrainConfig,
    build_alignment_dataset,
    decode_mlp,
    encode_mlp,
    train_head,
)
from traverse_p2.bench import run_benchmark
from traverse_p2.cli import main
from traverse_p2.core import PointCloud
from traverse_p2.ingest import decode_point_cloud, encode_point_cloud
from traverse_p2.labels import FilterConfig, OrientedBox, filter_pseudo_labels
from traverse_p2.p2 import decode_scores, encode_scores, p2_score
from traverse_p2.sim import SceneSpec, median_by_param, run_pipeline, sweep_localization_noise, sweep_traversals
from traverse_p2.spatial import build_index, count_brute_batch, count_within_batch
from traverse_p2.squash import VoxelFeatures, VoxelGridSpec, decode_store, encode_store

from test_align import finite_difference_check
from test_labels import check_monotonicity, random_scene

SEEDS = list(range(10))


def entropy(row):
    total = sum(row)
    if total == 0:
        return 0.0
    return -sum(n / total * math.log(n / total) for n in row if n) / math.log(len(row))


def test_c01_formula_values(record_criterion):
    ref = entropy([3, 1])
    got = {row: p2_score(row) for row in [(3, 1), (7, 7), (5, 0), (0, 0)]}
    ok = (
        abs(ref - 0.81128) < 1e-5
        and abs(got[(3, 1)] - ref) < 1e-6
        and abs(got[(7, 7)] - 1.0) < 1e-12
        and got[(5, 0)] == 0.0
        and got[(0, 0)] == 0.0
    )
    record_criterion(1, ok, f"(3,1)={got[(3, 1)]:.9f} (7,7)={got[(7, 7)]} (5,0)={got[(5, 0)]} (0,0)={got[(0, 0)]}")
    assert ok


@pytest.mark.slow
def test_c02_k_of_t_law(record_criterion):
    parts, ok = [], True
    for k, T in [(1, 5), (2, 5), (5, 5), (2, 10)]:
        expected = math.log(k) / math.log(T)
        # exact counts first, then the simulator
        row = [4] * k + [0] * (T - k)
        ok &= abs(p2_score(row) - expected) < 1e-12
        spec = SceneSpec(num_traversals=T, presence_k=k, ephemeral_jitter=0.0)
        rep, _ = run_pipeline(spec)
        ok &= abs(rep.mean_ephemeral - expected) <= 0.05
        parts.append(f"({k},{T}) {rep.mean_ephemeral:.4f} vs {expected:.4f}")
    record_criterion(2, ok, "; ".join(parts))
    assert ok


def test_c03_index_correctness(record_criterion):
    rng = np.random.default_rng(2024)
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    mismatches = trials = 0
    for _ in range(100):
        n = int(rng.integers(0, 3000))
        scale = rng.uniform(0.5, 20)
        pts = rng.normal(size=(n, 3)) * scale
        # some queries sit on points, some at random
        q = np.concatenate([rng.normal(size=(50, 3)) * scale, pts[: min(n, 20)]])
        r = float(rng.uniform(0.05, 3.0))
        truth = count_brute_batch(pts, q, r)
        for cell in (r / 2, r, 2 * r):
            idx = build_index(pts, cell)
            for b in backends:
                trials += 1
                mismatches += not np.array_equal(count_within_batch(idx, q, r, b), truth)
    ok = mismatches == 0
    record_criterion(3, ok, f"{trials} (trial, cell, backend) runs, {mismatches} mismatches")
    assert ok


@pytest.mark.slow
def test_c04_index_speedup(record_criterion):
    res = run_benchmark(1_000_000, 10_000, 0.3, 0.3, brute_queries=100, repeats=1)
    best = res.speedup_numba if _accel.HAVE_NUMBA else res.speedup_numpy
    ok = res.counts_agree and best >= 10 and res.speedup_numpy >= 10
    record_criterion(
        4,
        ok,
        f"speedup numba x{res.speedup_numba:,.0f}, numpy x{res.speedup_numpy:,.0f} "
        f"(brute {res.brute_per_query_s * 1e3:.2f} ms/query over {res.brute_queries} queries), counts agree={res.counts_agree}",
    )
    assert ok


def test_c05_separation(record_criterion, default_scene):
    rep, _ = default_scene
    ok = rep.auc > 0.95 and rep.mean_static > 0.8 and rep.mean_ephemeral < 0.3
    record_criterion(
        5, ok, f"AUC={rep.auc:.4f} mean static={rep.mean_static:.3f} mean ephemeral={rep.mean_ephemeral:.3f}"
    )
    assert ok


@pytest.mark.slow
def test_c06_traversal_count(record_criterion):
    rep2, _ = run_pipeline(SceneSpec(num_traversals=2))
    medians = median_by_param(sweep_traversals(SceneSpec(), [2, 5, 10, 20], SEEDS))
    values = [m for _, m in medians]
    monotone = all(b >= a for a, b in zip(values, values[1:]))
    ok = rep2.auc > 0.75 and monotone
    record_criterion(
        6, ok, f"T=2 AUC={rep2.auc:.4f}; median AUC by T " + ", ".join(f"{int(p)}:{m:.4f}" for p, m in medians)
    )
    assert ok


@pytest.mark.slow
def test_c07_localization_noise(record_criterion):
    base, _ = run_pipeline(SceneSpec())
    small, _ = run_pipeline(SceneSpec(loc_noise_trans=0.1))
    medians = median_by_param(sweep_localization_noise(SceneSpec(), [0.0, 0.1, 0.5, 2.0], SEEDS))
    values = [m for _, m in medians]
    monotone = all(b <= a for a, b in zip(values, values[1:]))
    ok = abs(small.auc - base.auc) <= 0.05 and monotone
    record_criterion(
        7,
        ok,
        f"AUC 0 m={base.auc:.4f} 0.1 m={small.auc:.4f}; median by noise "
        + ", ".join(f"{p}:{m:.4f}" for p, m in medians),
    )
    assert ok


@pytest.mark.slow
def test_c08_alignment(record_criterion, default_scene):
    _, scored = default_scene
    ds, _ = build_alignment_dataset(scored.dense_clouds, scored.points, scored.result.scores, seed=0)
    _, hist = train_head(ds, MlpSpec.for_input(ds.dim, seed=0), TrainConfig())
    grad_errs = [finite_difference_check(seed) for seed in range(5)]
    ok = hist[-1].val_l1 <= 0.05 and max(grad_errs) < 1e-4
    record_criterion(
        8, ok, f"val L1={hist[-1].val_l1:.4f} on {len(ds)} rows; worst gradient rel. error={max(grad_errs):.2e}"
    )
    assert ok


def test_c09_filter(record_criterion):
    unit = OrientedBox((0, 0, 0), (1, 1, 1), 0.0)
    cases = [([0.9] * 5, False), ([0.1] * 5, True), ([0.1, 0.8, 0.8, 0.8, 0.8], True), ([], False)]
    examples_ok = True
    for taus, want in cases:
        pts = np.zeros((len(taus), 3))
        kept, rejected = filter_pseudo_labels([unit], pts, np.array(taus), FilterConfig())
        examples_ok &= (len(kept) == 1) == want
        if not taus:
            examples_ok &= rejected[0].reason == "TooFewPoints"
    mono_ok, n_kept, n_rej = check_monotonicity(*random_scene(np.random.default_rng(9), 1000))
    ok = examples_ok and mono_ok
    record_criterion(9, ok, f"4 examples ok={examples_ok}; monotone on 1000 boxes ({n_kept} kept, {n_rej} persistent)")
    assert ok


def test_c10_determinism_and_round_trips(record_criterion, tmp_path):
    rng = np.random.default_rng(10)
    pts = (rng.normal(size=(5000, 3)) * 100).astype(np.float32).astype(np.float64)
    cloud = PointCloud(pts, rng.random(5000).astype(np.float32).astype(np.float64))
    back = decode_point_cloud(encode_point_cloud(cloud))
    fmt_ok = back.points.tobytes() == cloud.points.tobytes()
    scores = rng.random(5000).astype(np.float32)
    fmt_ok &= decode_scores(encode_scores(scores)).tobytes() == scores.tobytes()
    keys = np.unique(rng.integers(-1000, 1000, (5000, 3)), axis=0)
    store = VoxelFeatures(VoxelGridSpec(0.5, (-1, -1, -1), (1, 1, 1)), keys, rng.normal(size=(len(keys), 13)))
    s2 = decode_store(encode_store(store))
    fmt_ok &= s2.keys.tobytes() == store.keys.tobytes() and s2.features.tobytes() == store.features.tobytes()

    ds = AlignmentDataset.from_arrays(rng.normal(size=(500, 6)), rng.random(500))
    mlp, h1 = train_head(ds, MlpSpec.for_input(6, seed=3), TrainConfig(lr=0.01, epochs=3, batch_size=32))
    _, h2 = train_head(ds, MlpSpec.for_input(6, seed=3), TrainConfig(lr=0.01, epochs=3, batch_size=32))
    fmt_ok &= encode_mlp(decode_mlp(encode_mlp(mlp))) == encode_mlp(mlp)
    train_ok = h1 == h2

    flags = ["--route-length", "20", "--density", "20", "--seed", "5"]
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["simulate", "--out", str(d), *flags]) == 0
        assert main(["train-head", "--manifest", str(d / "manifest.json"), "--out", str(d / "head"),
                     "--location", "10", "--epochs", "2", "--max-queries", "1500"]) == 0
        files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "run_meta.txt")
        outs.append({p.relative_to(d): p.read_bytes() for p in files})
    cli_ok = outs[0] == outs[1] and len(outs[0]) > 10

    ok = fmt_ok and train_ok and cli_ok
    record_criterion(
        10, ok, f"round-trips={fmt_ok} train determinism={train_ok} CLI simulate/train-head identical={cli_ok} ({len(outs[0])} files)"
    )
    assert ok
