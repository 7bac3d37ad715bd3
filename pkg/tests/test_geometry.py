import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from dynba.errors import DegenerateConfiguration, InvariantViolation, NonPositiveDepth
from dynba.geometry import (CameraIntrinsics, CameraPose, SimilarityTransform, Trajectory, canonical_rotvec,
                            hat, project, relative_pose, right_jacobian, rotation_angle, so3_exp, so3_log,
                            umeyama_align, unproject)

UNIT = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


def rotvec_in_ball(max_norm):
    return vec3.filter(lambda w: np.linalg.norm(w) > 0).map(
        lambda w: w / np.linalg.norm(w)).flatmap(
        lambda axis: st.floats(0, max_norm).map(lambda a: axis * a))


def random_pose(rng, spread=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
    return CameraPose(w, rng.normal(scale=spread, size=3))


# -- projection -------------------------------------------------------------

def test_project_on_axis():
    np.testing.assert_array_equal(project([0, 0, 1], UNIT, CameraPose.identity()), [0, 0])


def test_project_hand_computed():
    np.testing.assert_allclose(project([1, 2, 4], K100, CameraPose.identity()), [75, 100], atol=1e-12)


def test_project_composes_pose_then_pinhole():
    pose = CameraPose(np.zeros(3), [0, 0, 1])
    np.testing.assert_allclose(project([0, 0, 1], UNIT, pose), [0, 0], atol=1e-15)
    # the camera-frame point sits at z = 2
    np.testing.assert_allclose(pose.apply([0.5, 0, 1]), [0.5, 0, 2])
    np.testing.assert_allclose(project([0.5, 0, 1], UNIT, pose), [0.25, 0])


@pytest.mark.parametrize("z", [0.0, -1.0, 1e-10])
def test_project_rejects_non_positive_depth(z):
    with pytest.raises(NonPositiveDepth):
        project([0, 0, z], UNIT, CameraPose.identity())


def test_unproject_examples():
    np.testing.assert_allclose(unproject([0, 0], 1.0, UNIT, CameraPose.identity()), [0, 0, 1])
    np.testing.assert_allclose(unproject([75, 100], 4.0, K100, CameraPose.identity()), [1, 2, 4])


def test_unproject_rejects_bad_depth():
    with pytest.raises(NonPositiveDepth):
        unproject([0, 0], 0.0, UNIT, CameraPose.identity())


def test_project_unproject_round_trip_1000_cases():
    rng = np.random.default_rng(0)
    intr = CameraIntrinsics.centered(300.0, 280.0, 640, 480)
    for _ in range(20):
        pose = random_pose(rng, 3.0)
        pix = rng.uniform([0, 0], [639, 479], size=(50, 2))
        depth = rng.uniform(0.1, 50.0, size=50)
        back = project(unproject(pix, depth, intr, pose), intr, pose)
        assert np.max(np.abs(back - pix)) < 1e-9


def test_pose_tuple_and_object_agree():
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    X = rng.normal(size=(5, 3)) + [0, 0, 8]
    X = X[pose.apply(X)[:, 2] > 0.1]
    np.testing.assert_array_equal(project(X, K100, pose), project(X, K100, (pose.R, pose.translation)))


# -- so(3) --------------------------------------------------------------------

def test_exp_matches_scipy():
    rng = np.random.default_rng(2)
    for w in rng.normal(size=(50, 3)):
        np.testing.assert_allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(rotvec_in_ball(np.pi - 1e-3))
def test_exp_log_round_trip(w):
    assert np.linalg.norm(so3_log(so3_exp(w)) - w) < 1e-10


def test_exp_log_near_pi():
    for a in (np.pi - 1e-3, np.pi - 1e-6):
        w = a * np.array([0.6, -0.8, 0.0])
        assert np.linalg.norm(so3_log(so3_exp(w)) - w) < 1e-8


def test_log_small_angle_is_first_order():
    w = np.array([1e-9, -2e-9, 3e-9])
    np.testing.assert_allclose(so3_log(so3_exp(w)), w, rtol=1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-20, 20)))
def test_canonical_rotvec_stays_in_ball_and_same_rotation(w):
    c = canonical_rotvec(w)
    assert np.linalg.norm(c) <= np.pi + 1e-12
    np.testing.assert_allclose(so3_exp(c), so3_exp(w), atol=1e-9)


def test_right_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        w = rng.normal(size=3)
        Jr = right_jacobian(w)
        R = so3_exp(w)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            # exp(w + dw) ~ exp(w) exp(Jr dw)
            lhs = (so3_exp(w + e) - so3_exp(w - e)) / 2e-6
            rhs = R @ hat(Jr[:, i])
            np.testing.assert_allclose(lhs, rhs, atol=1e-7)


def test_rotation_angle_examples():
    assert rotation_angle(np.zeros(3)) == 0
    assert rotation_angle(np.eye(3)) == 0
    assert rotation_angle(np.array([np.pi / 2, 0, 0])) == pytest.approx(np.pi / 2, abs=1e-15)


def test_rotation_angle_matrix_oracle():
    rng = np.random.default_rng(4)
    for R in Rotation.random(100, random_state=5).as_matrix():
        ref = np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))
        assert rotation_angle(R) == pytest.approx(ref, abs=1e-9)
    assert rng is not None


# -- poses ----------------------------------------------------------------------

def test_relative_pose_examples():
    a = CameraPose([0.1, 0.2, -0.3], [1, 2, 3])
    r = relative_pose(a, a)
    np.testing.assert_allclose(r.rotation, 0, atol=1e-15)
    np.testing.assert_allclose(r.translation, 0, atol=1e-15)
    t = relative_pose(CameraPose(np.zeros(3), [1, 0, 0]), CameraPose.identity())
    np.testing.assert_allclose(t.translation, [1, 0, 0])
    np.testing.assert_allclose(t.rotation, 0)


def test_relative_pose_closure():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        back = b.compose(relative_pose(a, b))
        np.testing.assert_allclose(back.matrix, a.matrix, atol=1e-10)
        assert rotation_angle(relative_pose(a, a).rotation) == pytest.approx(0, abs=1e-12)


def test_pose_rotation_is_canonicalised():
    p = CameraPose([2 * np.pi + 0.1, 0, 0], np.zeros(3))
    assert np.linalg.norm(p.rotation) <= np.pi


def test_pose_inverse_and_center():
    rng = np.random.default_rng(7)
    p = random_pose(rng)
    np.testing.assert_allclose(p.compose(p.inverse()).matrix, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(p.apply(p.center), 0, atol=1e-12)


def test_intrinsics_invariants():
    with pytest.raises(InvariantViolation):
        CameraIntrinsics(0.0, 1.0, 0, 0, 2, 2)
    with pytest.raises(InvariantViolation):
        CameraIntrinsics(1.0, 1.0, 5.0, 0, 4, 4)
    c = CameraIntrinsics.centered(10, 10, 64, 48)
    assert (c.cx, c.cy) == (31.5, 23.5)


def test_trajectory_requires_increasing_timestamps():
    with pytest.raises(InvariantViolation):
        Trajectory((CameraPose.identity(),) * 2, [0.0, 0.0])


# -- Umeyama ----------------------------------------------------------------------

def test_umeyama_identity():
    pts = np.random.default_rng(8).normal(size=(10, 3))
    S = umeyama_align(pts, pts)
    assert S.scale == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(S.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(S.translation, 0, atol=1e-12)


def test_umeyama_constructed_similarity():
    pts = np.random.default_rng(9).normal(size=(10, 3))
    S = umeyama_align(pts, 2 * pts + 1)
    assert S.scale == pytest.approx(2, abs=1e-12)
    np.testing.assert_allclose(S.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(S.translation, [1, 1, 1], atol=1e-12)


def test_umeyama_recovers_random_similarity():
    rng = np.random.default_rng(10)
    for i in range(20):
        R = Rotation.random(random_state=i).as_matrix()
        s, t = rng.uniform(0.1, 10), rng.normal(size=3) * 5
        src = rng.normal(size=(50, 3))
        S = umeyama_align(src, SimilarityTransform(s, R, t).apply(src))
        assert abs(S.scale - s) < 1e-9
        np.testing.assert_allclose(S.rotation, R, atol=1e-9)
        np.testing.assert_allclose(S.translation, t, atol=1e-9)
        assert np.linalg.det(S.rotation) == pytest.approx(1, abs=1e-9)


def test_umeyama_never_reflects():
    rng = np.random.default_rng(11)
    src = rng.normal(size=(30, 3))
    S = umeyama_align(src, src * [1, 1, -1])
    assert np.linalg.det(S.rotation) == pytest.approx(1, abs=1e-9)


def test_umeyama_rigid_mode_keeps_unit_scale():
    src = np.random.default_rng(12).normal(size=(20, 3))
    assert umeyama_align(src, 3 * src, with_scale=False).scale == 1.0


@pytest.mark.parametrize("pts", [np.zeros((5, 3)), np.outer(np.arange(5.0), [1, 2, 3])])
def test_umeyama_degenerate(pts):
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(pts, pts)
