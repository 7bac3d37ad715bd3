import re
from pathlib import Path

import numpy as np
import pytest

from dynba.errors import FormatError, InvariantViolation, MissingInput, NotDensified
from dynba.geometry import CameraIntrinsics, CameraPose, Trajectory, unproject
from dynba.pipeline import densify, initial_structure
from dynba.scene import (DepthMap, DynamicMask, FlowField, SceneBundle, TrackletSet, dense_pointmap,
                         export_pointmap, load_bundle, read_ply, read_raster, read_tracks, read_tum,
                         sample_depth, save_bundle, write_ply, write_raster, write_tracks, write_tum)
from dynba.synthetic import ground_truth_state

GOLDEN_TUM = Path(__file__).parent / "data" / "golden.tum"


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


# -- rasters -------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.float64])
def test_raster_round_trip(tmp_path, dtype, rng):
    a = (rng.uniform(0, 200, size=(5, 7, 2))).astype(dtype)
    write_raster(tmp_path / "a.dvr", a)
    b = read_raster(tmp_path / "a.dvr")
    assert b.dtype == a.dtype
    np.testing.assert_array_equal(a, b)


def test_raster_header_layout(tmp_path):
    write_raster(tmp_path / "a.dvr", np.zeros((2, 3), np.float32))
    data = (tmp_path / "a.dvr").read_bytes()
    assert data[:4] == b"DVR1"
    assert int.from_bytes(data[4:8], "little") == 2
    assert int.from_bytes(data[8:12], "little") == 3
    assert int.from_bytes(data[12:16], "little") == 1
    assert data[16] == 0
    assert len(data) == 17 + 2 * 3 * 4


def test_raster_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.dvr"
    p.write_bytes(b"NOPE" + bytes(13))
    with pytest.raises(FormatError):
        read_raster(p)
    write_raster(p, np.zeros((2, 2), np.uint8))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_raster(p)
    with pytest.raises(MissingInput):
        read_raster(tmp_path / "absent.dvr")


# -- domain invariants ------------------------------------------------------------

def test_negative_depth_names_frame_and_pixel():
    v = np.ones((4, 5))
    v[2, 3] = -1.0
    with pytest.raises(InvariantViolation, match=r"frame 7.*u=3, v=2"):
        DepthMap(v, 7)


def test_track_outside_image_is_rejected():
    pos = np.array([[[1.0, 1.0], [9.5, 1.0]]])
    t = TrackletSet(pos, np.array([[True, True]]), np.array([0], np.uint8))
    with pytest.raises(InvariantViolation):
        t.validate(8, 8)


def test_track_needs_two_visible_frames():
    pos = np.array([[[1.0, 1.0], [np.nan, np.nan]]])
    t = TrackletSet(pos, np.array([[True, False]]), np.array([0], np.uint8))
    with pytest.raises(InvariantViolation):
        t.validate(8, 8)


def test_flow_requires_distinct_frames_and_finite_vectors():
    with pytest.raises(InvariantViolation):
        FlowField(2, 2, np.zeros((3, 3, 2)))
    v = np.zeros((3, 3, 2))
    v[0, 0, 0] = np.inf
    with pytest.raises(InvariantViolation):
        FlowField(0, 1, v)


def test_mask_combined_must_be_union():
    sem = np.zeros((3, 3), bool)
    flow = np.eye(3, dtype=bool)
    with pytest.raises(InvariantViolation):
        DynamicMask(0, sem, flow, sem)
    assert DynamicMask(0, sem, flow, flow).combined.sum() == 3


# -- bundle persistence --------------------------------------------------------------

def test_save_load_round_trip_is_exact(tmp_path, arc_scene):
    bundle, _ = arc_scene
    save_bundle(bundle, tmp_path / "a")
    back = load_bundle(tmp_path / "a")
    assert back.frames == bundle.frames
    assert back.intrinsics == bundle.intrinsics
    # cues are stored as float32, so the in-memory float64 depth survives at that precision
    for d0, d1 in zip(bundle.depths, back.depths):
        np.testing.assert_array_equal(d0.values.astype(np.float32), d1.values)
    np.testing.assert_array_equal(bundle.tracks.visible, back.tracks.visible)
    np.testing.assert_array_equal(bundle.tracks.labels, back.tracks.labels)
    vis = bundle.tracks.visible
    np.testing.assert_array_equal(bundle.tracks.positions[vis].astype(np.float32), back.tracks.positions[vis])
    assert set(back.flows) == set(bundle.flows)
    for t in range(bundle.frames):
        np.testing.assert_array_equal(bundle.masks[t].semantic, back.masks[t].semantic)


def test_save_load_save_is_byte_identical(tmp_path, arc_scene):
    bundle, _ = arc_scene
    save_bundle(bundle, tmp_path / "a")
    save_bundle(load_bundle(tmp_path / "a"), tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_load_fails_on_missing_or_corrupt_input(tmp_path, arc_scene):
    bundle, _ = arc_scene
    save_bundle(bundle, tmp_path / "a")
    (tmp_path / "a" / "depth" / "000003.dvr").unlink()
    with pytest.raises(MissingInput):
        load_bundle(tmp_path / "a")
    save_bundle(bundle, tmp_path / "b")
    p = tmp_path / "b" / "depth" / "000001.dvr"
    data = bytearray(p.read_bytes())
    data[-4:] = np.float32(-2.0).tobytes()
    p.write_bytes(bytes(data))
    with pytest.raises(InvariantViolation, match="frame 1"):
        load_bundle(tmp_path / "b")


def test_tracks_table_round_trip(tmp_path):
    pos = np.array([[[1.5, 2.25], [np.nan, np.nan], [3.0, 4.0]]])
    vis = np.array([[True, False, True]])
    t = TrackletSet(pos, vis, np.array([1], np.uint8))
    write_tracks(tmp_path / "t.bin", t)
    assert (tmp_path / "t.bin").stat().st_size == 8 + 1 + 3 * 9
    back = read_tracks(tmp_path / "t.bin")
    np.testing.assert_array_equal(back.visible, vis)
    np.testing.assert_array_equal(back.positions[vis], pos[vis])
    assert back.labels[0] == 1


# -- exporters ----------------------------------------------------------------------

def _golden_trajectory():
    poses = (CameraPose.identity(),
             CameraPose([0.0, np.pi / 2, 0.0], [0.0, 0.0, 0.0]),
             CameraPose([0.0, 0.0, 0.0], [0.0, -2.0, 0.5]))
    return Trajectory(poses, (0.0, 0.5, 1.25))


def test_tum_matches_golden_file(tmp_path):
    write_tum(tmp_path / "t.tum", _golden_trajectory())
    assert (tmp_path / "t.tum").read_text() == GOLDEN_TUM.read_text()


def test_tum_round_trip(tmp_path):
    traj = _golden_trajectory()
    write_tum(tmp_path / "t.tum", traj)
    back = read_tum(tmp_path / "t.tum")
    for a, b in zip(traj.poses, back.poses):
        np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-8)


def test_ply_header_grammar(tmp_path, rng):
    pts = rng.normal(size=(6, 3))
    write_ply(tmp_path / "p.ply", pts, np.arange(6))
    data = (tmp_path / "p.ply").read_bytes()
    header, _, body = data.partition(b"end_header\n")
    lines = header.decode("ascii").splitlines()
    assert lines[0] == "ply"
    assert lines[1] == "format binary_little_endian 1.0"
    assert re.fullmatch(r"element vertex \d+", lines[2]) and lines[2].endswith(" 6")
    assert all(re.fullmatch(r"property (float|int) \w+", ln) for ln in lines[3:])
    assert len(body) == 6 * 16
    back, ids = read_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(back, pts.astype(np.float32))
    np.testing.assert_array_equal(ids, np.arange(6))


# -- point maps ---------------------------------------------------------------------

def _tiny_bundle(pointmaps=None):
    intr = CameraIntrinsics(1.0, 1.0, 1.0, 1.0, 3, 3)
    depth = DepthMap(np.ones((3, 3)), 0)
    pos = np.array([[[0.0, 0.0], [1.0, 1.0]]])
    tracks = TrackletSet(pos, np.array([[True, True]]), np.array([0], np.uint8))
    masks = tuple(DynamicMask.from_semantic(t, np.zeros((3, 3), bool)) for t in range(2))
    return SceneBundle(2, intr, Trajectory.identity(2), (depth, DepthMap(np.ones((3, 3)), 1)), tracks, masks,
                       pointmaps=pointmaps)


def test_export_before_densification_raises():
    with pytest.raises(NotDensified):
        export_pointmap(_tiny_bundle(), 0)


def test_pointmap_three_by_three_unit_plane():
    # principal point at the centre pixel, so u - cx and v - cy span {-1, 0, 1}
    b = _tiny_bundle()
    pm = dense_pointmap(b.depths[0].values, b.intrinsics, CameraPose.identity())
    pm, valid = export_pointmap(b.replace(pointmaps=(pm, pm)), 0)
    assert valid.all()
    np.testing.assert_array_equal(pm[..., 2], 1.0)
    assert set(pm[..., 0].ravel()) == {-1.0, 0.0, 1.0}
    np.testing.assert_array_equal(pm[1, :, 0], [-1, 0, 1])
    np.testing.assert_array_equal(pm[:, 1, 1], [-1, 0, 1])


def test_pointmap_agrees_with_unproject(rng):
    intr = CameraIntrinsics.centered(40.0, 42.0, 16, 12)
    pose = CameraPose([0.1, -0.2, 0.05], [0.3, 0.1, -0.4])
    depth = rng.uniform(1, 5, size=(12, 16))
    pm = dense_pointmap(depth, intr, pose)
    for _ in range(100):
        u, v = rng.integers(16), rng.integers(12)
        np.testing.assert_allclose(pm[v, u], unproject([u, v], depth[v, u], intr, pose), atol=1e-12)


def test_invalid_depth_leaves_nan_points():
    depth = np.ones((3, 3))
    depth[0, 0] = 0.0
    pm = dense_pointmap(depth, CameraIntrinsics(1.0, 1.0, 1.0, 1.0, 3, 3), CameraPose.identity())
    assert np.isnan(pm[0, 0]).all()
    assert np.isfinite(pm[1:]).all()


def test_densified_noiseless_scene_matches_ground_truth(arc_scene):
    bundle, gt = arc_scene
    state = ground_truth_state(bundle, gt)
    state = initial_structure(state) if state.static_points is None else state
    _, _, pm = densify(state, 5)
    vv, uu = np.nonzero(np.isfinite(pm).all(axis=2))
    X = unproject(np.stack([uu, vv], 1).astype(float), gt.depths[5][vv, uu], gt.intrinsics,
                  gt.trajectory.poses[5])
    assert np.max(np.abs(pm[vv, uu] - X)) < 1e-6


# -- depth sampling ------------------------------------------------------------------

def test_sample_depth_interpolates_inverse_depth():
    d = np.array([[1.0, 2.0], [1.0, 2.0]])
    z, ok = sample_depth(d, [[0.5, 0.5]], max_spread=2.0)
    assert ok[0]
    assert z[0] == pytest.approx(1 / (0.5 / 1 + 0.5 / 2))


def test_sample_depth_rejects_edges():
    d = np.array([[1.0, 5.0], [1.0, 5.0]])
    z, ok = sample_depth(d, [[0.5, 0.5]])
    assert not ok[0] and z[0] == 0.0
    z, ok = sample_depth(d, [[0.5, 0.5]], fallback=True)
    assert z[0] == 1.0
