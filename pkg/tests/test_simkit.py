"""Synthetic scenarios, predictor noise and event synthesis."""
import numpy as np
import pytest

from core.errors import InvalidInputError
from core.event_core import EventBuffer, make_events
from core.fusion import prediction_uncertainty
from core.geometry import project, quat_angle
from core.simkit import (
    event_noise, event_patch_noise, generate_scenario, make_landmarks, script_detections, simulate_prediction,
    simulate_sequence, synthesize_events, trajectory,
)
from db.models import CameraIntrinsics, Channel, NoiseModel, ScenarioConfig


class TestTrajectory:
    def test_full_revolution_returns_to_start(self):
        poses = trajectory(ScenarioConfig(n_frames=361, x_interval_deg=0.0, render_events=False))
        np.testing.assert_allclose(poses[0].rotation, poses[360].rotation, atol=1e-9)

    def test_one_degree_per_frame(self):
        poses = trajectory(ScenarioConfig(n_frames=300, render_events=False))
        steps = [quat_angle(a.q, b.q) for a, b in zip(poses[:-1], poses[1:])]
        np.testing.assert_allclose(steps, 1.0, atol=1e-6)

    def test_low_motion_slows_rotation(self):
        cfg = ScenarioConfig(n_frames=40, low_motion_ranges=[(11, 20)], low_motion_rate_scale=0.1, render_events=False)
        poses = trajectory(cfg)
        assert quat_angle(poses[10].q, poses[11].q) == pytest.approx(0.1, abs=1e-6)
        assert quat_angle(poses[25].q, poses[26].q) == pytest.approx(1.0, abs=1e-6)


class TestScenario:
    def test_labels_reproject_exactly(self):
        cfg = ScenarioConfig(n_frames=20, render_events=False)
        scenario = generate_scenario(cfg)
        for frame in scenario.frames:
            again = project(scenario.landmarks, frame.pose, cfg.intrinsics)
            assert np.array_equal(again.points, frame.keypoints.points)

    def test_box_contains_keypoints(self):
        scenario = generate_scenario(ScenarioConfig(n_frames=20, render_events=False))
        for frame in scenario.frames:
            points = frame.keypoints.points[frame.keypoints.valid]
            assert np.all(points[:, 0] >= frame.box.x_min) and np.all(points[:, 0] <= frame.box.x_max)
            assert np.all(points[:, 1] >= frame.box.y_min) and np.all(points[:, 1] <= frame.box.y_max)

    def test_symmetric_landmarks_mirror_across_yz(self):
        landmarks = make_landmarks(6, 0.3, seed=1, symmetric=True)
        np.testing.assert_allclose(landmarks.points[3:], landmarks.points[:3] * [-1.0, 1.0, 1.0])

    def test_low_motion_detections_collapse(self):
        cfg = ScenarioConfig(n_frames=30, low_motion_ranges=[(11, 20)], render_events=False)
        detections = script_detections(generate_scenario(cfg))
        assert all(d.score < 0.98 for d in detections[10:20])
        assert all(d.score > 0.98 for d in detections[:10] + detections[20:])


class TestSimulatePrediction:
    def test_zero_noise_reproduces_truth(self):
        truth = generate_scenario(ScenarioConfig(n_frames=1, render_events=False)).frames[0].keypoints
        pred = simulate_prediction(truth, True, NoiseModel(), seed=0, frame_index=1, channel=Channel.RGB)
        assert np.array_equal(pred.keypoints.points, truth.points)
        assert prediction_uncertainty(pred) == 0.0

    def test_clustered_corruption_shares_one_direction(self):
        truth = generate_scenario(ScenarioConfig(n_frames=1, render_events=False)).frames[0].keypoints
        model = NoiseModel(corrupt_fraction=0.33, corrupt_offset=50.0, clustered=True)
        pred = simulate_prediction(truth, True, model, seed=4, frame_index=1, channel=Channel.EVENT)
        shift = pred.keypoints.points - truth.points
        moved = np.linalg.norm(shift, axis=1) > 1e-9
        assert moved.sum() == 6
        np.testing.assert_allclose(np.linalg.norm(shift[moved], axis=1), 50.0)
        np.testing.assert_allclose(shift[moved], np.repeat(shift[moved][:1], 6, axis=0), atol=1e-9)

    def test_corrupt_frames_drop_keypoints(self):
        truth = generate_scenario(ScenarioConfig(n_frames=1, render_events=False)).frames[0].keypoints
        pred = simulate_prediction(truth, True, NoiseModel.default_rgb(), seed=0, frame_index=1, channel=Channel.RGB)
        assert pred.keypoints.valid_count == 3
        assert np.isnan(pred.keypoints.points[~pred.keypoints.valid]).all()

    def test_displacement_share_counts_the_keypoints_left_after_dropping(self):
        truth = generate_scenario(ScenarioConfig(n_frames=1, render_events=False)).frames[0].keypoints
        model = NoiseModel(invalid_fraction_corrupt=1 / 3, corrupt_fraction=0.5, corrupt_offset=30.0)
        pred = simulate_prediction(truth, True, model, seed=2, frame_index=1, channel=Channel.RGB)
        assert pred.keypoints.valid_count == 12
        valid = pred.keypoints.valid
        moved = np.linalg.norm(pred.keypoints.points[valid] - truth.points[valid], axis=1) > 1e-9
        assert moved.sum() == 6

    def test_doubling_mc_sigma_doubles_uncertainty(self):
        truth = generate_scenario(ScenarioConfig(n_frames=1, render_events=False)).frames[0].keypoints
        single, double = NoiseModel(mc_sigma_clean=1.0), NoiseModel(mc_sigma_clean=2.0)
        u1 = [prediction_uncertainty(simulate_prediction(truth, False, single, 0, n, Channel.RGB)) for n in range(100)]
        u2 = [prediction_uncertainty(simulate_prediction(truth, False, double, 0, n, Channel.RGB)) for n in range(100)]
        assert np.mean(u2) / np.mean(u1) == pytest.approx(2.0, rel=0.1)

    def test_deterministic_per_frame_and_channel(self):
        truth = generate_scenario(ScenarioConfig(n_frames=1, render_events=False)).frames[0].keypoints
        model = NoiseModel.default_event()
        a = simulate_prediction(truth, True, model, 5, 9, Channel.EVENT)
        b = simulate_prediction(truth, True, model, 5, 9, Channel.EVENT)
        c = simulate_prediction(truth, True, model, 5, 9, Channel.RGB)
        assert np.array_equal(a.mc_samples, b.mc_samples, equal_nan=True)
        assert not np.array_equal(a.mc_samples, c.mc_samples, equal_nan=True)


class TestSynthesizeEvents:
    def test_constant_frames_emit_nothing(self):
        frames = [np.full((4, 4), 0.5)] * 5
        assert len(synthesize_events(frames, 0.2, fps=30)) == 0

    def test_step_emits_one_event_per_threshold(self):
        before = np.ones((2, 2))
        after = before.copy()
        after[0, 1] = np.exp(0.6)
        events = synthesize_events([before, after], 0.2, fps=30).snapshot()
        assert len(events) == 3
        assert set(events["x"].tolist()) == {1} and set(events["y"].tolist()) == {0}
        assert set(events["p"].tolist()) == {1}

    def test_darkening_emits_negative_events(self):
        events = synthesize_events([np.ones((1, 1)), np.full((1, 1), np.exp(-0.45))], 0.2, fps=30).snapshot()
        assert len(events) == 2
        assert set(events["p"].tolist()) == {-1}

    def test_frame_rate_does_not_change_the_event_count(self):
        def ramp(n):
            return [np.full((1, 1), np.exp(2.0 * k / (n - 1))) for k in range(n)]

        slow = synthesize_events(ramp(11), 0.2, fps=30)
        fast = synthesize_events(ramp(21), 0.2, fps=60)
        assert abs(len(slow) - len(fast)) <= 1

    def test_timestamps_are_sorted_within_the_span(self):
        frames = [np.full((3, 3), np.exp(0.3 * k)) for k in range(4)]
        events = synthesize_events(frames, 0.2, fps=30, t0_us=1000).snapshot()
        assert np.all(np.diff(events["t"].astype(np.int64)) >= 0)
        assert events["t"].min() >= 1000 and events["t"].max() <= 1000 + 100_000

    @pytest.mark.parametrize("frames", [[], [np.ones((2, 2))]])
    def test_needs_two_frames(self, frames):
        with pytest.raises(InvalidInputError):
            synthesize_events(frames, 0.2, fps=30)

    def test_needs_a_positive_threshold(self):
        with pytest.raises(InvalidInputError):
            synthesize_events([np.ones((2, 2))] * 2, 0.0, fps=30)


def base_buffer(n=2000, width=64, height=48, seed=0) -> EventBuffer:
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, 100_000, size=n))
    return EventBuffer(width, height, make_events(t, rng.integers(0, width, n), rng.integers(0, height, n),
                                                  rng.choice([-1, 1], n)))


class TestEventNoise:
    def test_zero_rates_keep_the_stream(self):
        buffer = base_buffer()
        assert np.array_equal(event_noise(buffer, 0.0, 0.0, seed=1).snapshot(), buffer.snapshot())

    def test_full_removal_empties_the_stream(self):
        assert len(event_noise(base_buffer(), 0.0, 1.0, seed=1)) == 0

    def test_patch_noise_stays_inside_the_quad(self):
        buffer = base_buffer()
        left_half = np.array([[0.0, 0.0], [32.0, 0.0], [32.0, 48.0], [0.0, 48.0]])
        noisy = event_patch_noise(buffer, left_half, 0.5, seed=2, mode="add").snapshot()
        before = buffer.snapshot()
        assert len(noisy) > len(before)
        assert np.sum(noisy["x"] >= 32) == np.sum(before["x"] >= 32)

    def test_patch_removal_only_touches_the_quad(self):
        buffer = base_buffer()
        left_half = np.array([[0.0, 0.0], [32.0, 0.0], [32.0, 48.0], [0.0, 48.0]])
        noisy = event_patch_noise(buffer, left_half, 1.0, seed=3, mode="remove").snapshot()
        assert np.all(noisy["x"] >= 32)
        assert len(noisy) == np.sum(buffer.snapshot()["x"] >= 32)

    def test_negative_rates_are_rejected(self):
        with pytest.raises(InvalidInputError):
            event_noise(base_buffer(), -0.1, 0.0, seed=1)

    def test_unknown_patch_mode_is_rejected(self):
        with pytest.raises(InvalidInputError):
            event_patch_noise(base_buffer(), None, 0.5, seed=1, mode="flip")


class TestSimulateSequence:
    def test_same_config_gives_identical_bundles(self):
        cfg = ScenarioConfig(n_frames=6, width=160, height=120, render_events=True,
                             intrinsics=CameraIntrinsics(fx=200.0, fy=200.0, cx=80.0, cy=60.0),
                             harsh_ranges=[(2, 3)], low_motion_ranges=[(4, 5)])
        a, b = simulate_sequence(cfg), simulate_sequence(cfg)
        assert np.array_equal(a.events, b.events)
        for channel in (Channel.RGB, Channel.EVENT):
            assert np.array_equal(a.predictions[channel].keypoints, b.predictions[channel].keypoints, equal_nan=True)
        assert [lbl.q for lbl in a.labels] == [lbl.q for lbl in b.labels]

    def test_bundle_shapes(self):
        cfg = ScenarioConfig(n_frames=5, render_events=False)
        bundle = simulate_sequence(cfg)
        assert len(bundle.labels) == 5 and len(bundle.detections) == 5
        assert bundle.predictions[Channel.RGB].keypoints.shape == (5, 18, 2)
        assert bundle.predictions[Channel.EVENT].mc_samples.shape == (5, cfg.mc_samples, 18, 2)
        assert len(bundle.events) == 0

    def test_preset_overlaps_windows_on_trajectory_two(self):
        cfg = ScenarioConfig.preset("cassini", 2, "far", render_events=False)
        harsh = set(range(cfg.harsh_ranges[0][0], cfg.harsh_ranges[0][1] + 1))
        low = set(range(cfg.low_motion_ranges[0][0], cfg.low_motion_ranges[0][1] + 1))
        assert harsh & low
        assert cfg.name == "cassini-2-far"
