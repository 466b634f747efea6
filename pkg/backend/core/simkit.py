"""Synthetic sequences standing in for the recorded dataset and the trained predictors.

Everything random is drawn from generators seeded by explicit tuples so a
config always regenerates bit-identical data.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Literal, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from core.detection import BoundingBox, Detection, derive_box
from core.errors import InvalidInputError
from core.event_core import EVENT_DTYPE, EventBuffer, make_events
from core.fusion import ChannelPrediction
from core.geometry import KeypointSet, LandmarkSet, Pose, points_in_polygon, project, warp_points
from core.pnp_ransac import CHANNEL_CODES
from core.replay import PredictionStream, SequenceBundle
from db.models import Channel, FrameLabel, NoiseModel, ScenarioConfig, SequenceMeta, frames_in_ranges

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-3
CROSSING_EPS = 1e-9

# Stream tags keep the seed tuples of different generators apart
SEED_LANDMARKS = 11
SEED_DETECTIONS = 13
SEED_EVENT_NOISE = 17


@dataclass(frozen=True, eq=False)
class ScenarioFrame:
    frame_index: int
    pose: Pose
    keypoints: KeypointSet
    box: BoundingBox
    harsh: bool
    low_motion: bool


@dataclass(frozen=True, eq=False)
class Scenario:
    config: ScenarioConfig
    landmarks: LandmarkSet
    frames: List[ScenarioFrame]


def make_landmarks(Z: int, extent: float, seed: int, symmetric: bool = False) -> LandmarkSet:
    """Random points in a cube of edge `extent` centred on the model origin.

    With symmetric=True the second half mirrors the first across the y-z plane.
    """
    rng = np.random.default_rng([seed, SEED_LANDMARKS])
    if symmetric:
        half = (Z + 1) // 2
        base = rng.uniform(-extent / 2, extent / 2, size=(half, 3))
        mirrored = base[: Z - half] * np.array([-1.0, 1.0, 1.0])
        return LandmarkSet(np.vstack([base, mirrored]))
    return LandmarkSet(rng.uniform(-extent / 2, extent / 2, size=(Z, 3)))


def trajectory(cfg: ScenarioConfig) -> List[Pose]:
    """Full revolutions about y, stepping about x by x_interval_deg after each one.

    Frames inside low-motion ranges advance at rotation_rate * low_motion_rate_scale.
    """
    low_motion = frames_in_ranges(cfg.low_motion_ranges)
    translation = np.array([0.0, 0.0, cfg.distance_m[cfg.distance]])
    poses, angle = [], 0.0
    for n in range(1, cfg.n_frames + 1):
        if n > 1:
            angle += cfg.rotation_rate * (cfg.low_motion_rate_scale if n in low_motion else 1.0)
        revolutions = math.floor(angle / 360.0 + 1e-12)
        rotation = Rotation.from_euler("YX", [angle, revolutions * cfg.x_interval_deg], degrees=True)
        x, y, z, w = rotation.as_quat()
        poses.append(Pose(np.array([w, x, y, z]), translation))
    return poses


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    landmarks = make_landmarks(cfg.Z, cfg.object_extent, cfg.seed, cfg.symmetric_landmarks)
    harsh = frames_in_ranges(cfg.harsh_ranges)
    low_motion = frames_in_ranges(cfg.low_motion_ranges)
    frames = []
    for n, pose in enumerate(trajectory(cfg), start=1):
        keypoints = project(landmarks, pose, cfg.intrinsics, cfg.apply_distortion)
        frames.append(ScenarioFrame(n, pose, keypoints, derive_box(keypoints), n in harsh, n in low_motion))
    logger.info(f"generated {len(frames)} frames for {cfg.name}")
    return Scenario(cfg, landmarks, frames)


def simulate_prediction(truth: KeypointSet, corrupt: bool, model: NoiseModel, seed: int, frame_index: int,
                        channel: Channel, Q: int = 32) -> ChannelPrediction:
    """Noisy keypoint predictor with Q MC samples.

    On corrupt frames a share of keypoints is dropped first, then a share of the
    remaining ones is displaced by corrupt_offset (one common direction when
    clustered).
    """
    rng = np.random.default_rng([seed, frame_index, CHANNEL_CODES[Channel(channel)]])
    Z = truth.Z
    points = truth.points + rng.normal(0.0, model.base_sigma, size=(Z, 2))
    valid = truth.valid.copy()
    mc_sigma = model.mc_sigma_clean
    if corrupt:
        candidates = np.flatnonzero(valid)
        n_invalid = min(len(candidates), int(round(model.invalid_fraction_corrupt * Z)))
        valid[rng.choice(candidates, size=n_invalid, replace=False)] = False
        remaining = np.flatnonzero(valid)
        n_displaced = int(round(model.corrupt_fraction * len(remaining)))
        displaced = rng.choice(remaining, size=n_displaced, replace=False)
        if model.clustered:
            angles = np.full(n_displaced, rng.uniform(0.0, 2.0 * np.pi))
        else:
            angles = rng.uniform(0.0, 2.0 * np.pi, size=n_displaced)
        points[displaced] += model.corrupt_offset * np.column_stack([np.cos(angles), np.sin(angles)])
        mc_sigma = model.mc_sigma_corrupt
    points[~valid] = np.nan
    samples = points[None] + rng.normal(0.0, mc_sigma, size=(Q, Z, 2))
    return ChannelPrediction(KeypointSet(points, valid), samples, channel)


def script_detections(scenario: Scenario, seed: Optional[int] = None) -> List[Detection]:
    """Detector stand-in: jittered ground-truth boxes with high scores, except
    inside low-motion ranges where the score collapses and the box drifts."""
    cfg = scenario.config
    seed = cfg.seed if seed is None else seed
    detections = []
    for frame in scenario.frames:
        rng = np.random.default_rng([seed, SEED_DETECTIONS, frame.frame_index])
        jitter = rng.normal(0.0, cfg.det_jitter_px, size=4)
        x_min, y_min, x_max, y_max = np.array(frame.box.as_tuple()) + jitter
        if frame.low_motion:
            dx, dy = cfg.det_drift_px * rng.choice([-1.0, 1.0], size=2)
            x_min, x_max, y_min, y_max = x_min + dx, x_max + dx, y_min + dy, y_max + dy
            score = float(np.clip(cfg.det_collapse_score + rng.uniform(-0.05, 0.05), 0.0, 1.0))
        else:
            score = float(rng.uniform(0.985, 1.0))
        detections.append(Detection(BoundingBox(float(x_min), float(y_min), float(x_max), float(y_max)), score))
    return detections


def render_intensity_frames(keypoint_sets: Iterable[KeypointSet], width: int, height: int, blob_sigma: float = 6.0,
                            background: float = 0.05, peak: float = 1.0) -> Iterator[np.ndarray]:
    """Luminance grids with a Gaussian blob on every valid keypoint."""
    radius = int(math.ceil(4 * blob_sigma))
    offsets = np.arange(-radius, radius + 1)
    for kps in keypoint_sets:
        image = np.full((height, width), background)
        for (u, v), ok in zip(kps.points, kps.valid):
            if not ok or not np.isfinite(u) or not np.isfinite(v):
                continue
            cols = int(round(u)) + offsets
            rows = int(round(v)) + offsets
            cols = cols[(cols >= 0) & (cols < width)]
            rows = rows[(rows >= 0) & (rows < height)]
            if len(cols) == 0 or len(rows) == 0:
                continue
            gx = np.exp(-0.5 * ((cols - u) / blob_sigma) ** 2)
            gy = np.exp(-0.5 * ((rows - v) / blob_sigma) ** 2)
            patch = image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
            np.maximum(patch, background + peak * np.outer(gy, gx), out=patch)
        yield np.clip(image, 0.0, None)


def synthesize_events(intensity_frames: Iterable[np.ndarray], contrast_threshold: float, fps: float,
                      t0_us: int = 0, timestamps: Optional[Sequence[int]] = None) -> EventBuffer:
    """Threshold-crossing event model over linearly interpolated log intensity.

    Each pixel keeps the log level of its last event; every crossing of
    +-contrast_threshold from that level emits one event, timestamped where the
    interpolated signal reaches the crossing.
    """
    if contrast_threshold <= 0:
        raise InvalidInputError(f"contrast threshold must be positive, got {contrast_threshold}")
    frames = iter(intensity_frames)
    first = next(frames, None)
    if first is None:
        raise InvalidInputError("at least 2 intensity frames are required")
    first = np.asarray(first, dtype=float)
    height, width = first.shape
    reference = np.log(np.maximum(first, LOG_FLOOR))
    previous = reference.copy()

    def frame_time(k: int) -> int:
        if timestamps is not None:
            return int(timestamps[k])
        return t0_us + int(round(k * 1e6 / fps))

    chunks = []
    k = 0
    for image in frames:
        k += 1
        current = np.log(np.maximum(np.asarray(image, dtype=float), LOG_FLOOR))
        t_a, t_b = frame_time(k - 1), frame_time(k)
        for polarity in (1, -1):
            change = polarity * (current - reference)
            counts = np.floor(change / contrast_threshold + CROSSING_EPS).astype(np.int64)
            counts[counts < 0] = 0
            pixels = np.flatnonzero(counts)
            if len(pixels) == 0:
                continue
            n = counts.flat[pixels]
            flat = np.repeat(pixels, n)
            step = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + 1
            levels = reference.flat[flat] + polarity * step * contrast_threshold
            start, end = previous.flat[flat], current.flat[flat]
            span = end - start
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(span != 0, (levels - start) / span, 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            t = t_a + np.round(frac * (t_b - t_a)).astype(np.int64)
            y, x = np.divmod(flat, width)
            chunks.append(make_events(t, x, y, np.full(len(flat), polarity)))
            reference.flat[pixels] += polarity * n * contrast_threshold
        previous = current

    if k == 0:
        raise InvalidInputError("at least 2 intensity frames are required")
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    events = events[np.lexsort((events["x"], events["y"], events["t"]))]
    logger.debug(f"synthesized {len(events)} events over {k} frame intervals")
    return EventBuffer(width, height, events)


def random_quad(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Four random vertices ordered by angle around their centroid (a simple quadrilateral)."""
    corners = rng.uniform([0.0, 0.0], [width, height], size=(4, 2))
    center = corners.mean(axis=0)
    order = np.argsort(np.arctan2(corners[:, 1] - center[1], corners[:, 0] - center[0]))
    return corners[order]


def _perturb(buffer: EventBuffer, add_rate: float, remove_rate: float, rng: np.random.Generator,
             polygon: Optional[np.ndarray] = None) -> EventBuffer:
    if add_rate < 0 or remove_rate < 0:
        raise InvalidInputError("noise rates must be non-negative")
    events = buffer.snapshot()
    n = len(events)
    coords = np.column_stack([events["x"] + 0.5, events["y"] + 0.5]).astype(float)
    eligible = np.ones(n, dtype=bool) if polygon is None else points_in_polygon(coords, polygon)

    keep = ~(eligible & (rng.random(n) < remove_rate))
    mean = add_rate * n
    n_add = max(0, int(round(rng.normal(mean, math.sqrt(mean))))) if mean > 0 else 0

    added = np.zeros(0, dtype=EVENT_DTYPE)
    if n_add and n:
        if polygon is None:
            lo, hi = np.zeros(2), np.array([buffer.width, buffer.height], dtype=float)
        else:
            lo = np.clip(polygon.min(axis=0), 0, None)
            hi = np.minimum(polygon.max(axis=0), [buffer.width, buffer.height])
        points = np.zeros((0, 2))
        for _ in range(100):
            if len(points) >= n_add:
                break
            draw = rng.uniform(lo, hi, size=(2 * n_add, 2))
            if polygon is not None:
                draw = draw[points_in_polygon(draw, polygon)]
            points = np.vstack([points, draw])
        points = np.floor(points[:n_add]).astype(np.int64)
        points[:, 0] = np.clip(points[:, 0], 0, buffer.width - 1)
        points[:, 1] = np.clip(points[:, 1], 0, buffer.height - 1)
        t = rng.integers(int(events["t"].min()), int(events["t"].max()) + 1, size=len(points))
        p = rng.choice([-1, 1], size=len(points))
        added = make_events(t, points[:, 0], points[:, 1], p)

    merged = np.concatenate([events[keep], added])
    merged = merged[np.argsort(merged["t"], kind="stable")]
    return EventBuffer(buffer.width, buffer.height, merged)


def event_noise(buffer: EventBuffer, add_rate: float, remove_rate: float, seed: int) -> EventBuffer:
    """Adds about add_rate * N uniformly placed events and drops each event with probability remove_rate."""
    rng = np.random.default_rng([seed, SEED_EVENT_NOISE])
    return _perturb(buffer, add_rate, remove_rate, rng)


def event_patch_noise(buffer: EventBuffer, quad: Optional[np.ndarray], rate: float, seed: int,
                      mode: Literal["add", "remove", "both"] = "both") -> EventBuffer:
    """event_noise restricted to a quadrilateral; a random one is drawn when quad is None."""
    if mode not in ("add", "remove", "both"):
        raise InvalidInputError(f"unknown patch noise mode '{mode}'")
    rng = np.random.default_rng([seed, SEED_EVENT_NOISE, 1])
    if quad is None:
        quad = random_quad(buffer.width, buffer.height, rng)
    quad = np.asarray(quad, dtype=float).reshape(-1, 2)
    if len(quad) < 3:
        raise InvalidInputError(f"patch polygon needs at least 3 vertices, got {len(quad)}")
    add_rate = rate if mode in ("add", "both") else 0.0
    remove_rate = rate if mode in ("remove", "both") else 0.0
    return _perturb(buffer, add_rate, remove_rate, rng, quad)


def simulate_sequence(cfg: ScenarioConfig, progress: bool = False) -> SequenceBundle:
    """Builds a complete bundle: labels, both prediction streams, detections and events.

    Event-channel predictions, detections excepted, live in event-sensor pixels.
    """
    scenario = generate_scenario(cfg)
    meta = SequenceMeta(
        name=cfg.name, fps=cfg.fps, n_frames=cfg.n_frames, width=cfg.width, height=cfg.height,
        harsh_ranges=cfg.harsh_ranges, low_motion_ranges=cfg.low_motion_ranges, Z=cfg.Z,
        object_id=cfg.name.split("-")[0],
    )
    to_event = cfg.warp.inverse()

    labels, rgb_preds, event_preds, event_truths = [], [], [], []
    for frame in tqdm(scenario.frames, desc=f"simulate {cfg.name}", disable=not progress):
        truth = frame.keypoints
        event_truth = warp_points(truth, to_event)
        event_truths.append(event_truth)
        rgb_preds.append(simulate_prediction(truth, frame.harsh, cfg.noise_rgb, cfg.seed, frame.frame_index,
                                             Channel.RGB, cfg.mc_samples))
        event_preds.append(simulate_prediction(event_truth, frame.low_motion, cfg.noise_event, cfg.seed,
                                               frame.frame_index, Channel.EVENT, cfg.mc_samples))
        points = np.where(truth.valid[:, None], truth.points, 0.0)
        labels.append(FrameLabel(
            frame_index=frame.frame_index, q=tuple(frame.pose.q), t=tuple(frame.pose.t),
            keypoints=[tuple(p) for p in points], keypoints_valid=truth.valid.tolist(),
            box=frame.box.as_tuple(), harsh=frame.harsh, low_motion=frame.low_motion,
        ))

    events = np.zeros(0, dtype=EVENT_DTYPE)
    if cfg.render_events and cfg.n_frames >= 2:
        timestamps = [meta.frame_timestamp(n) for n in range(1, cfg.n_frames + 1)]
        images = render_intensity_frames(event_truths, cfg.width, cfg.height)
        events = synthesize_events(images, cfg.contrast_threshold, cfg.fps, timestamps=timestamps).snapshot()

    return SequenceBundle(
        meta=meta, intrinsics=cfg.intrinsics, warp=cfg.warp, landmarks=scenario.landmarks, labels=labels,
        events=events, detections=script_detections(scenario),
        predictions={
            Channel.RGB: PredictionStream.from_predictions(Channel.RGB, rgb_preds, cfg.Z, cfg.mc_samples),
            Channel.EVENT: PredictionStream.from_predictions(Channel.EVENT, event_preds, cfg.Z, cfg.mc_samples),
        },
    )
