"""Pose algebra, projection, distortion and the event-to-RGB warp."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core.errors import InvalidInputError, SingularFitError
from core.event_core import EventFrame
from core.geometry import (
    KeypointSet, LandmarkSet, Pose, apply_warp, distort_points, fit_alignment, points_in_polygon, project,
    quat_angle, undistort_points, warp_frame, warp_points,
)
from db.models import AffineWarp, CameraIntrinsics

unit_quaternions = st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3
)


def test_pose_normalizes_to_non_negative_w():
    pose = Pose(np.array([-2.0, 0.0, 0.0, 0.0]), np.zeros(3))
    np.testing.assert_allclose(pose.q, [1.0, 0.0, 0.0, 0.0])


def test_pose_rejects_zero_quaternion():
    with pytest.raises(InvalidInputError):
        Pose(np.zeros(4), np.zeros(3))


def test_from_rotation_recovers_the_pose(make_pose):
    pose = make_pose(np.random.default_rng(0))
    assert Pose.from_rotation(pose.rotation, pose.t).allclose(pose, atol=1e-12)


def test_projection_through_a_chained_pose(make_pose, landmarks, K):
    rng = np.random.default_rng(1)
    outer, inner = make_pose(rng), make_pose(rng, distance=0.0)
    chained = Pose.from_rotation(outer.rotation @ inner.rotation, outer.rotation @ inner.t + outer.t)
    direct = project(landmarks, chained, K)
    stepwise = project(LandmarkSet(inner.transform(landmarks.points)), outer, K)
    np.testing.assert_allclose(direct.points, stepwise.points, atol=1e-9)


def test_project_point_on_axis_hits_principal_point(K):
    landmarks = LandmarkSet(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]]))
    kps = project(landmarks, Pose.identity([0.0, 0.0, 1.0]), K)
    np.testing.assert_allclose(kps.points[0], [K.cx, K.cy])
    np.testing.assert_allclose(kps.points[1], [K.cx + 100.0, K.cy])
    assert kps.valid.all()


def test_project_marks_points_behind_camera_invalid(K):
    landmarks = LandmarkSet(np.array([[0.0, 0.0, -2.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]]))
    kps = project(landmarks, Pose.identity([0.0, 0.0, 1.0]), K)
    assert kps.valid.tolist() == [False, True, True, True]
    assert np.isnan(kps.points[0]).all()


class TestQuatAngle:
    def test_identical(self):
        assert quat_angle([1, 0, 0, 0], [1, 0, 0, 0]) == 0.0

    def test_antipodal_is_same_rotation(self):
        q = Pose.from_axis_angle([1, 2, 3], 40.0).q
        assert quat_angle(q, -q) == pytest.approx(0.0, abs=1e-5)

    def test_quarter_turn(self):
        q = Pose.from_axis_angle([1, 0, 0], 90.0).q
        assert quat_angle([1, 0, 0, 0], q) == pytest.approx(90.0, abs=1e-9)

    def test_zero_quaternion_raises(self):
        with pytest.raises(InvalidInputError):
            quat_angle([0, 0, 0, 0], [1, 0, 0, 0])

    @settings(max_examples=200, deadline=None)
    @given(unit_quaternions, unit_quaternions)
    def test_symmetric_and_bounded(self, a, b):
        angle = quat_angle(a, b)
        assert 0.0 <= angle <= 180.0
        assert angle == pytest.approx(quat_angle(b, a), abs=1e-9)


class TestUndistort:
    def test_round_trip_within_a_micro_pixel(self):
        K = CameraIntrinsics(fx=900.0, fy=910.0, cx=400.0, cy=360.0, dist=(-0.1, 0.01, 0.0, 0.001, -0.001))
        rng = np.random.default_rng(1)
        ideal = KeypointSet(rng.uniform([50.0, 50.0], [750.0, 670.0], size=(200, 2)))
        recovered = undistort_points(distort_points(ideal, K), K)
        assert recovered.valid.all()
        assert np.max(np.abs(recovered.points - ideal.points)) < 1e-6

    def test_no_distortion_is_a_copy(self, K):
        kps = KeypointSet(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = undistort_points(kps, K)
        np.testing.assert_array_equal(out.points, kps.points)


class TestFitAlignment:
    def test_recovers_scale_and_translation(self):
        truth = AffineWarp(sx=1.1, sy=0.9, tx=5.0, ty=-3.0)
        src = np.random.default_rng(2).uniform(0, 600, size=(30, 2))
        fit = fit_alignment(src, apply_warp(src, truth))
        assert fit.residual_rms < 1e-9
        for name in ("sx", "sy", "tx", "ty"):
            assert getattr(fit.warp, name) == pytest.approx(getattr(truth, name), abs=1e-9)

    def test_full_affine_recovers_shear(self):
        truth = AffineWarp(sx=1.05, sy=0.95, tx=2.0, ty=1.0, kx=0.02, ky=-0.01)
        src = np.random.default_rng(4).uniform(0, 600, size=(30, 2))
        fit = fit_alignment(src, apply_warp(src, truth), full_affine=True)
        assert fit.warp.kx == pytest.approx(0.02, abs=1e-9)
        assert fit.warp.ky == pytest.approx(-0.01, abs=1e-9)

    def test_constant_x_is_singular(self):
        src = np.column_stack([np.full(5, 10.0), np.arange(5.0)])
        with pytest.raises(SingularFitError):
            fit_alignment(src, src)

    def test_collinear_points_are_singular_for_full_affine(self):
        src = np.column_stack([np.arange(6.0), 2.0 * np.arange(6.0)])
        with pytest.raises(SingularFitError):
            fit_alignment(src, src, full_affine=True)


def test_identity_warp_leaves_points_bit_identical():
    kps = KeypointSet(np.random.default_rng(5).uniform(0, 800, size=(18, 2)))
    assert np.array_equal(warp_points(kps, AffineWarp.identity()).points, kps.points)


def test_identity_warp_frame_matches_input():
    values = np.random.default_rng(6).random((40, 50))
    frame = EventFrame(values, 50, 40, empty=False)
    out = warp_frame(frame, AffineWarp.identity())
    np.testing.assert_allclose(out.values, values, atol=1e-12)


def test_warp_frame_integer_shift():
    values = np.random.default_rng(7).random((20, 30))
    out = warp_frame(EventFrame(values, 30, 20, empty=False), AffineWarp(tx=3.0))
    np.testing.assert_allclose(out.values[:, 3:], values[:, :-3], atol=1e-12)
    assert np.all(out.values[:, :3] == 0.0)


def test_warp_frame_conserves_mass_inside_bounds():
    values = np.zeros((20, 30))
    values[5:15, 5:20] = np.random.default_rng(9).random((10, 15))
    out = warp_frame(EventFrame(values, 30, 20, empty=False), AffineWarp(tx=4.0, ty=-3.0))
    assert out.values.sum() == pytest.approx(values.sum(), rel=0.01)


def test_signed_warp_pads_with_no_activity():
    values = np.random.default_rng(8).random((10, 12))
    frame = EventFrame(values, 12, 10, empty=False, polarity_mode="signed")
    out = warp_frame(frame, AffineWarp(tx=2.0))
    np.testing.assert_allclose(out.values[:, :2], 0.5)
    np.testing.assert_allclose(out.values[:, 2:], values[:, :-2], atol=1e-12)
    assert out.polarity_mode == "signed"


def test_warp_keeps_empty_frames_empty():
    out = warp_frame(EventFrame.zeros(12, 10, 0, 5, "signed"), AffineWarp(tx=2.0, sx=1.5))
    assert out.empty
    assert out.values.shape == (10, 12)
    assert out.polarity_mode == "signed"


def test_points_in_polygon_square():
    square = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
    inside = points_in_polygon(np.array([[5.0, 5.0], [15.0, 5.0], [-1.0, -1.0], [9.9, 0.1]]), square)
    assert inside.tolist() == [True, False, False, True]
