"""Per-frame orchestration: detection smoothing, alignment, arbitration and scoring."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from core.detection import BoundingBox, DetectionSmoother, derive_box
from core.errors import InvalidInputError
from core.fusion import ChannelPrediction, FusionResult, estimate_pose
from core.geometry import KeypointSet, Pose, apply_warp, undistort_points, warp_points
from core.metrics import FrameError, frame_error
from core.replay import ReplayEngine, SequenceBundle, replay
from db.models import CameraIntrinsics, Channel, FusionConfig, FusionMode, FusionRecord, PipelineMode, RansacConfig

logger = logging.getLogger(__name__)

REASON_MISSING_INPUT = "missing_input"
REASON_NO_VALID_KEYPOINTS = "no_valid_keypoints"
REASON_RANSAC_DEGENERATE = "ransac_degenerate"

REQUIRED_CHANNELS = {
    PipelineMode.FUSION: (Channel.RGB, Channel.EVENT),
    PipelineMode.FUSION_NO_GATE: (Channel.RGB, Channel.EVENT),
    PipelineMode.RGB_ONLY: (Channel.RGB,),
    PipelineMode.EVENT_ONLY: (Channel.EVENT,),
}


@dataclass
class PipelineRun:
    sequence: str
    mode: PipelineMode
    records: List[FusionRecord] = field(default_factory=list)
    errors: List[FrameError] = field(default_factory=list)


def fusion_config_for(mode: PipelineMode, base: Optional[FusionConfig] = None) -> FusionConfig:
    base = base or FusionConfig()
    if mode == PipelineMode.FUSION:
        return base.model_copy(update={"gate": True})
    if mode == PipelineMode.FUSION_NO_GATE:
        return base.model_copy(update={"gate": False})
    channel = Channel.RGB if mode == PipelineMode.RGB_ONLY else Channel.EVENT
    return base.model_copy(update={"force_channel": channel, "fallback": False})


def to_rgb_space(pred: ChannelPrediction, bundle: SequenceBundle) -> ChannelPrediction:
    """Maps event-sensor predictions into RGB pixels through the bundle's warp."""
    keypoints = warp_points(pred.keypoints, bundle.warp)
    samples = apply_warp(pred.mc_samples.reshape(-1, 2), bundle.warp).reshape(pred.mc_samples.shape)
    return ChannelPrediction(keypoints, samples, pred.channel)


def undistort_prediction(pred: ChannelPrediction, K: CameraIntrinsics) -> ChannelPrediction:
    """Removes lens distortion from the keypoints and from every MC sample."""
    if not K.has_distortion:
        return pred
    keypoints = undistort_points(pred.keypoints, K)
    samples = np.stack([undistort_points(KeypointSet(sample, pred.keypoints.valid), K).points
                        for sample in pred.mc_samples])
    return ChannelPrediction(keypoints, samples, pred.channel)


def _degenerate_record(frame: int, mode: PipelineMode, reason: str, provenance: str, n_events: int = 0) -> FusionRecord:
    pose = Pose.zero()
    decided = {
        PipelineMode.RGB_ONLY: FusionMode.RGB_ONLY,
        PipelineMode.EVENT_ONLY: FusionMode.EVENT_ONLY,
    }.get(mode, FusionMode.FUSED)
    return FusionRecord(frame=frame, mode=decided, provenance=provenance, degenerate=True, reason=reason,
                        q=tuple(pose.q), t=tuple(pose.t), n_events=n_events)


def _frame_box(smoothed: Optional[BoundingBox], rgb: ChannelPrediction, event: ChannelPrediction) -> BoundingBox:
    if smoothed is not None:
        return smoothed
    merged = KeypointSet(
        np.vstack([rgb.keypoints.points, event.keypoints.points]),
        np.concatenate([rgb.keypoints.valid, event.keypoints.valid]),
    )
    return derive_box(merged)


def run_pipeline(bundle: SequenceBundle, mode: PipelineMode = PipelineMode.FUSION,
                 cfg: Optional[RansacConfig] = None, fusion_cfg: Optional[FusionConfig] = None,
                 seed_score_min: Optional[float] = None, threaded: bool = False,
                 progress: bool = False) -> PipelineRun:
    """Estimates a pose for every frame of the bundle and scores it against the labels."""
    mode = PipelineMode(mode)
    cfg = cfg or RansacConfig()
    fusion_cfg = fusion_config_for(mode, fusion_cfg)
    Z = bundle.landmarks.Z
    for channel in REQUIRED_CHANNELS[mode]:
        if channel not in bundle.predictions:
            logger.warning(f"bundle {bundle.meta.name} has no {channel.value} predictions")

    smoother = DetectionSmoother(seed_score_min)
    run = PipelineRun(bundle.meta.name, mode)
    frames = ReplayEngine(bundle) if threaded else replay(bundle)
    for rf in tqdm(frames, total=bundle.meta.n_frames, desc=f"{mode.value} {bundle.meta.name}", disable=not progress):
        n = rf.frame_index
        n_events = len(rf.batch)
        gt = bundle.gt_pose(n)
        smoothed = None
        if bundle.detections is not None and bundle.detections[n - 1] is not None:
            smoothed = smoother.update(bundle.detections[n - 1]).box

        preds = {}
        for channel in (Channel.RGB, Channel.EVENT):
            stream = bundle.predictions.get(channel)
            preds[channel] = stream.frame(n) if stream is not None else None
        missing = [c.value for c in REQUIRED_CHANNELS[mode] if preds[c] is None]
        if missing:
            logger.warning(f"frame {n}: missing {', '.join(missing)} predictions")
            run.records.append(_degenerate_record(n, mode, REASON_MISSING_INPUT, "missing_input", n_events))
            run.errors.append(frame_error(gt, None, n, degenerate=True))
            continue

        rgb = preds[Channel.RGB] or ChannelPrediction.invalid(Z, Channel.RGB)
        event = preds[Channel.EVENT] or ChannelPrediction.invalid(Z, Channel.EVENT)
        if preds[Channel.EVENT] is not None:
            event = to_rgb_space(event, bundle)
        rgb, event = undistort_prediction(rgb, bundle.intrinsics), undistort_prediction(event, bundle.intrinsics)

        try:
            box = _frame_box(smoothed, rgb, event)
        except InvalidInputError:
            run.records.append(_degenerate_record(n, mode, REASON_NO_VALID_KEYPOINTS, "both_invalid", n_events))
            run.errors.append(frame_error(gt, None, n, degenerate=True))
            continue

        result: FusionResult = estimate_pose(rgb, event, bundle.landmarks, box, bundle.intrinsics, cfg, fusion_cfg)
        reason = None
        if result.degenerate:
            used = {FusionMode.RGB_ONLY: (rgb,), FusionMode.EVENT_ONLY: (event,)}.get(result.mode, (rgb, event))
            no_keypoints = all(p.keypoints.valid_count == 0 for p in used)
            reason = REASON_NO_VALID_KEYPOINTS if no_keypoints else REASON_RANSAC_DEGENERATE
        logger.debug(f"frame {n}: mode={result.mode.value} provenance={result.provenance} degenerate={result.degenerate}")
        run.records.append(result.to_record(n, reason, n_events))
        run.errors.append(frame_error(gt, result.pose, n, result.degenerate))

    n_degenerate = sum(e.degenerate for e in run.errors)
    logger.info(f"{mode.value} on {bundle.meta.name}: {len(run.errors)} frames, {n_degenerate} degenerate")
    return run
