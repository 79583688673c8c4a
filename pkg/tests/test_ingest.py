import struct

import numpy as np
import pytest

from traverse_p2.core import Frame, PointCloud, Pose6DoF, Traversal, transform_to_global
from traverse_p2.errors import (
    BadMagic,
    MalformedRecord,
    ManifestEmpty,
    NoFramesInWindow,
    NonFinitePoint,
    NonMonotonicArclength,
    TruncatedFile,
)
from traverse_p2.ingest import (
    AccumulationConfig,
    DatasetManifest,
    TraversalEntry,
    accumulate_dense,
    decode_point_cloud,
    encode_point_cloud,
    load_manifest,
    load_point_cloud,
    load_poses,
    load_traversals,
    locations_for_route,
    voxel_downsample,
    write_manifest,
    write_point_cloud,
    write_poses,
)


def _f32_cloud(rng, n):
    pts = (rng.normal(size=(n, 3)) * 50).astype(np.float32).astype(np.float64)
    inten = rng.random(n).astype(np.float32).astype(np.float64)
    return PointCloud(pts, inten)


def test_empty_cloud_file(tmp_path):
    p = tmp_path / "e.pcb"
    p.write_bytes(b"PCB1" + struct.pack("<I", 0))
    assert len(load_point_cloud(p)) == 0


def test_single_record(tmp_path):
    p = tmp_path / "one.pcb"
    p.write_bytes(b"PCB1" + struct.pack("<I4f", 1, 1.5, -2.0, 0.25, 0.5))
    c = load_point_cloud(p)
    np.testing.assert_array_equal(c.points, [[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(c.intensity, [0.5])


def test_round_trip_bit_exact(tmp_path, rng):
    cloud = _f32_cloud(rng, 10_000)
    p = tmp_path / "c.pcb"
    write_point_cloud(p, cloud)
    back = load_point_cloud(p)
    assert back.points.tobytes() == cloud.points.tobytes()
    assert back.intensity.tobytes() == cloud.intensity.tobytes()


def test_origin_offset_applied_on_both_sides(rng):
    origin = np.array([500_000.0, 4_000_000.0, 100.0])
    local = _f32_cloud(rng, 100)
    cloud = PointCloud(local.points + origin, local.intensity)
    back = decode_point_cloud(encode_point_cloud(cloud, origin), origin)
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-6, rtol=0)


def test_bad_magic_truncation_and_nan_report_offsets(tmp_path):
    good = encode_point_cloud(PointCloud(np.ones((3, 3))))
    with pytest.raises(BadMagic) as e:
        decode_point_cloud(b"XXXX" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(TruncatedFile) as e:
        decode_point_cloud(good[:-5])
    assert e.value.offset == len(good) - 5
    bad = bytearray(good)
    struct.pack_into("<f", bad, 8 + 16 * 2 + 4, float("nan"))
    with pytest.raises(NonFinitePoint) as e:
        decode_point_cloud(bytes(bad))
    assert e.value.offset == 8 + 16 * 2 and e.value.index == 2


def test_poses_empty_identity_and_normalize(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("# nothing here\n")
    assert load_poses(p) == []
    p.write_text("0 0 0 0 1 0 0 0 0\n")
    [(fid, pose, arc)] = load_poses(p)
    assert fid == 0 and arc == 0 and pose.allclose(Pose6DoF.identity(), atol=0)
    p.write_text("3 1 2 3 0.999 0 0 0 7.5\n")
    [(_, pose, _)] = load_poses(p)
    assert abs(np.linalg.norm(pose.rotation) - 1) < 1e-9
    np.testing.assert_allclose(pose.rotation, [1, 0, 0, 0], atol=1e-12)


def test_pose_errors(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("0 0 0 0 1 0 0 0 0\n0 0 0\n")
    with pytest.raises(MalformedRecord) as e:
        load_poses(p)
    assert e.value.line_no == 2
    p.write_text("0 0 0 0 1 0 0 0 5\n1 0 0 0 1 0 0 0 4\n")
    with pytest.raises(NonMonotonicArclength):
        load_poses(p)


def test_pose_file_round_trip(tmp_path, rng):
    recs = [(i, Pose6DoF(rng.normal(size=3) * 1e5, rng.normal(size=4)), float(i) * 1.3) for i in range(50)]
    p = tmp_path / "p.txt"
    write_poses(p, recs)
    back = load_poses(p)
    for (fa, pa, aa), (fb, pb, ab) in zip(recs, back):
        assert fa == fb and aa == ab
        assert pa.translation.tobytes() == pb.translation.tobytes()
        # renormalization on load may move the last ulp
        np.testing.assert_allclose(pb.rotation, pa.rotation, atol=1e-15, rtol=0)


def _line_traversal(arcs, pts_per_frame=3, tid=0):
    frames = []
    for i, a in enumerate(arcs):
        cloud = PointCloud(np.full((pts_per_frame + i % 2, 3), float(i)))
        frames.append(Frame(i, cloud, Pose6DoF([a, 0, 0], [1, 0, 0, 0]), a))
    return Traversal(tid, frames)


def test_accumulate_window_selection():
    trav = _line_traversal([float(a) for a in range(11)])
    dense = accumulate_dense(trav, 5.0, AccumulationConfig(spacing_m=2.0, window_hm=3.0))
    assert dense.source_frame_ids == (2, 3, 4, 5, 6, 7, 8)
    assert len(dense) == sum(len(trav.frames[i].cloud) for i in range(2, 9))
    # order: frame order, then point order within the frame
    expected = np.concatenate([trav.frames[i].global_cloud().points for i in range(2, 9)])
    np.testing.assert_array_equal(dense.points.points, expected)


def test_accumulate_empty_window():
    trav = _line_traversal([0.0, 10.0])
    with pytest.raises(NoFramesInWindow):
        accumulate_dense(trav, 5.0, AccumulationConfig(spacing_m=1.0, window_hm=2.0))


def test_accumulate_single_frame_equals_transformed_frame():
    frame = Frame(4, PointCloud(np.eye(3)), Pose6DoF([1, 2, 3], [0.5, 0.5, 0.5, 0.5]), 7.0)
    dense = accumulate_dense(Traversal(1, [frame]), 7.0, AccumulationConfig())
    np.testing.assert_array_equal(dense.points.points, transform_to_global(frame.cloud, frame.pose).points)


def test_accumulation_config_validation():
    with pytest.raises(ValueError):
        AccumulationConfig(spacing_m=4.0, window_hm=1.0)
    with pytest.raises(ValueError):
        AccumulationConfig(spacing_m=0.0)


@pytest.mark.parametrize(
    "route, expected",
    [((0.0, 10.0), [0, 2, 4, 6, 8, 10]), ((0.0, 9.5), [0, 2, 4, 6, 8]), ((3.0, 3.0), [3])],
)
def test_locations_for_route(route, expected):
    trav = _line_traversal(list(route))
    assert locations_for_route([trav], AccumulationConfig(spacing_m=2.0, window_hm=1.0)) == expected


def test_all_frames_covered_when_window_at_least_half_spacing(rng):
    arcs = np.sort(rng.uniform(0, 50, 40))
    trav = _line_traversal(list(arcs))
    cfg = AccumulationConfig(spacing_m=3.0, window_hm=1.5)
    seen = set()
    for loc in locations_for_route([trav], cfg):
        try:
            seen |= set(accumulate_dense(trav, loc, cfg).source_frame_ids)
        except NoFramesInWindow:
            pass
    assert seen == {f.frame_id for f in trav.frames}


def test_manifest_round_trip_and_loading(tmp_path, rng):
    paths = []
    for i in range(3):
        p = tmp_path / f"f{i}.pcb"
        write_point_cloud(p, _f32_cloud(rng, 5))
        paths.append(p)
    origin = np.array([1000.0, 2000.0, 0.0])
    write_poses(tmp_path / "poses.txt", [(i, Pose6DoF([i, 0, 0], [1, 0, 0, 0]), float(i)) for i in range(3)], origin)
    m = DatasetManifest(origin, [TraversalEntry(7, paths, tmp_path / "poses.txt")], [0.0, 1.0], tmp_path)
    write_manifest(tmp_path / "manifest.json", m)
    back = load_manifest(tmp_path / "manifest.json")
    assert back.locations == [0.0, 1.0]
    [trav] = load_traversals(back)
    assert trav.traversal_id == 7
    np.testing.assert_allclose(trav.frames[2].pose.translation, [2, 0, 0])


def test_empty_manifest(tmp_path):
    (tmp_path / "m.json").write_text('{"traversals": []}')
    with pytest.raises(ManifestEmpty):
        load_manifest(tmp_path / "m.json")


def test_voxel_downsample_keeps_one_point_per_voxel():
    cloud = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0]])
    out = voxel_downsample(cloud, 1.0)
    np.testing.assert_array_equal(out.points, [[0.1, 0.1, 0.1], [1.5, 0, 0]])
