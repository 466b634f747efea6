"""Cross-modal arbitration: CMKD consistency gate, MC uncertainty and channel selection."""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.detection import BoundingBox
from core.errors import InvalidInputError, UndefinedCMKDError
from core.geometry import KeypointSet, LandmarkSet, Pose
from core.pnp_ransac import (
    CHANNEL_CODES, Correspondences, PnPResult, channel_correspondences, fuse_correspondences, ransac_pnp,
)
from db.models import CameraIntrinsics, Channel, FusionConfig, FusionMode, FusionRecord, RansacConfig

logger = logging.getLogger(__name__)

MODE_OF_CHANNEL = {Channel.RGB: FusionMode.RGB_ONLY, Channel.EVENT: FusionMode.EVENT_ONLY}


@dataclass(frozen=True, eq=False)
class ChannelPrediction:
    """Keypoints of one channel together with their Q Monte-Carlo samples (Q, Z, 2)."""
    keypoints: KeypointSet
    mc_samples: np.ndarray
    channel: Channel

    def __post_init__(self):
        samples = np.asarray(self.mc_samples, dtype=float)
        if samples.ndim != 3 or samples.shape[1:] != (self.keypoints.Z, 2):
            raise InvalidInputError(
                f"MC samples of shape {samples.shape} do not match {self.keypoints.Z} keypoints"
            )
        object.__setattr__(self, "mc_samples", samples)
        object.__setattr__(self, "channel", Channel(self.channel))

    @classmethod
    def invalid(cls, Z: int, channel: Channel, Q: int = 2) -> "ChannelPrediction":
        kps = KeypointSet(np.full((Z, 2), np.nan), np.zeros(Z, dtype=bool))
        return cls(kps, np.full((Q, Z, 2), np.nan), channel)


@dataclass(frozen=True, eq=False)
class FusionResult:
    pose: Pose
    degenerate: bool
    mode: FusionMode
    cmkd: Optional[float]
    threshold_E: float
    u_rgb: float
    u_event: float
    inliers_rgb: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    inliers_event: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    provenance: str = "cmkd_gate"
    fallback: bool = False

    def to_record(self, frame: int, reason: Optional[str] = None, n_events: int = 0) -> FusionRecord:
        def finite_or_none(value):
            return None if value is None or not math.isfinite(value) else float(value)

        return FusionRecord(
            frame=frame, mode=self.mode, provenance=self.provenance, fallback=self.fallback,
            degenerate=self.degenerate, reason=reason,
            q=tuple(float(v) for v in self.pose.q), t=tuple(float(v) for v in self.pose.t),
            cmkd=finite_or_none(self.cmkd), threshold_E=finite_or_none(self.threshold_E),
            u_rgb=finite_or_none(self.u_rgb), u_event=finite_or_none(self.u_event),
            n_inliers_rgb=len(self.inliers_rgb), n_inliers_event=len(self.inliers_event),
            n_events=n_events,
        )


def _common_valid(a: KeypointSet, b: KeypointSet) -> np.ndarray:
    return a.valid & b.valid & np.all(np.isfinite(a.points), axis=1) & np.all(np.isfinite(b.points), axis=1)


def cmkd(m_rgb: KeypointSet, m_event: KeypointSet) -> float:
    """Median distance between the two channels over landmarks valid in both."""
    if m_rgb.Z != m_event.Z:
        raise InvalidInputError(f"channel keypoint counts differ: {m_rgb.Z} vs {m_event.Z}")
    common = _common_valid(m_rgb, m_event)
    if not np.any(common):
        raise UndefinedCMKDError("no landmark is valid in both channels")
    distances = np.linalg.norm(m_rgb.points[common] - m_event.points[common], axis=1)
    return float(np.median(distances))


def cmkd_threshold(box: BoundingBox, alpha: float = 0.2) -> float:
    if alpha < 0:
        raise InvalidInputError(f"alpha must be non-negative, got {alpha}")
    return alpha * box.diagonal


def uncertainty(samples: np.ndarray, valid: Optional[np.ndarray] = None, aggregate: str = "mean") -> float:
    """Three sample standard deviations across Q, averaged over valid landmarks.

    The x and y spreads are aggregated separately and then halved. Returns inf
    when no landmark is valid.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 3 or samples.shape[2] != 2:
        raise InvalidInputError(f"expected samples of shape (Q, Z, 2), got {samples.shape}")
    if samples.shape[0] < 2:
        raise InvalidInputError(f"uncertainty needs at least 2 samples, got {samples.shape[0]}")
    mask = np.all(np.isfinite(samples), axis=(0, 2))
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not np.any(mask):
        return math.inf
    # centred on the first sample so identical samples give exactly zero
    selected = samples[:, mask, :]
    spread = 3.0 * np.std(selected - selected[:1], axis=0, ddof=1)
    reduce = np.median if aggregate == "median" else np.mean
    u_x, u_y = reduce(spread[:, 0]), reduce(spread[:, 1])
    return float((u_x + u_y) / 2.0)


def prediction_uncertainty(pred: ChannelPrediction, aggregate: str = "mean") -> float:
    return uncertainty(pred.mc_samples, pred.keypoints.valid, aggregate)


def _solve(corrs: Correspondences, K: CameraIntrinsics, cfg: RansacConfig) -> PnPResult:
    if len(corrs) < cfg.sample_size:
        logger.debug(f"only {len(corrs)} correspondences, frame is degenerate")
        return PnPResult.degenerate_result()
    return ransac_pnp(corrs, K, cfg)


def _split_inliers(corrs: Correspondences, result: PnPResult):
    if result.degenerate:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    ids = corrs.landmark_id[result.inliers]
    channels = corrs.channel[result.inliers]
    return ids[channels == CHANNEL_CODES[Channel.RGB]], ids[channels == CHANNEL_CODES[Channel.EVENT]]


def estimate_single_channel(pred: ChannelPrediction, L: LandmarkSet, K: CameraIntrinsics,
                            cfg: Optional[RansacConfig] = None) -> PnPResult:
    corrs = channel_correspondences(pred.keypoints, L, pred.channel)
    return _solve(corrs, K, cfg or RansacConfig())


def estimate_pose(pred_rgb: ChannelPrediction, pred_event: ChannelPrediction, L: LandmarkSet, box: BoundingBox,
                  K: CameraIntrinsics, cfg: Optional[RansacConfig] = None,
                  fusion_cfg: Optional[FusionConfig] = None) -> FusionResult:
    """Per-frame pose from both channels.

    Event keypoints must already be in RGB pixel space. If the channels agree
    (CMKD <= E) both are pooled into one RANSAC; otherwise the channel with the
    lower uncertainty is solved alone, ties going to the event channel.
    """
    cfg = cfg or RansacConfig()
    fusion_cfg = fusion_cfg or FusionConfig()
    try:
        distance = cmkd(pred_rgb.keypoints, pred_event.keypoints)
    except UndefinedCMKDError:
        distance = None
    threshold = cmkd_threshold(box, fusion_cfg.alpha)
    u_rgb = prediction_uncertainty(pred_rgb, fusion_cfg.u_aggregate)
    u_event = prediction_uncertainty(pred_event, fusion_cfg.u_aggregate)
    common = dict(cmkd=distance, threshold_E=threshold, u_rgb=u_rgb, u_event=u_event)
    preds = {Channel.RGB: pred_rgb, Channel.EVENT: pred_event}

    if pred_rgb.keypoints.valid_count == 0 and pred_event.keypoints.valid_count == 0:
        logger.debug("both channels invalid")
        return FusionResult(Pose.zero(), True, FusionMode.EVENT_ONLY, provenance="both_invalid", **common)

    if fusion_cfg.force_channel is not None:
        channel = Channel(fusion_cfg.force_channel)
        return _single_channel_result(preds, channel, L, K, cfg, fallback=False, provenance="forced", common=common)

    gate_open = distance is not None and distance <= threshold
    if not fusion_cfg.gate or gate_open:
        corrs = fuse_correspondences(pred_rgb.keypoints, pred_event.keypoints, L)
        result = _solve(corrs, K, cfg)
        inliers_rgb, inliers_event = _split_inliers(corrs, result)
        provenance = "cmkd_gate" if fusion_cfg.gate else "gate_disabled"
        logger.debug(f"fused solve ({provenance}): cmkd={distance}, E={threshold:.2f}, {result.n_inliers} inliers")
        return FusionResult(result.pose, result.degenerate, FusionMode.FUSED, inliers_rgb=inliers_rgb,
                            inliers_event=inliers_event, provenance=provenance, **common)

    channel = Channel.RGB if u_rgb < u_event else Channel.EVENT
    provenance = "cmkd_gate" if distance is not None else "cmkd_undefined"
    logger.debug(f"gate closed ({provenance}): cmkd={distance}, E={threshold:.2f}, "
                 f"u_rgb={u_rgb:.2f}, u_event={u_event:.2f}, using {channel.value}")
    return _single_channel_result(preds, channel, L, K, cfg, fusion_cfg.fallback, provenance, common)


def _single_channel_result(preds, channel: Channel, L: LandmarkSet, K: CameraIntrinsics, cfg: RansacConfig,
                           fallback: bool, provenance: str, common: dict) -> FusionResult:
    result = estimate_single_channel(preds[channel], L, K, cfg)
    used, fell_back = channel, False
    if result.degenerate and fallback:
        other = Channel.EVENT if channel == Channel.RGB else Channel.RGB
        retry = estimate_single_channel(preds[other], L, K, cfg)
        if not retry.degenerate:
            logger.debug(f"{channel.value} solve degenerate, falling back to {other.value}")
            result, used, fell_back = retry, other, True

    empty = np.zeros(0, dtype=np.int64)
    ids = channel_correspondences(preds[used].keypoints, L, used).landmark_id[result.inliers]
    inliers_rgb = ids if used == Channel.RGB else empty
    inliers_event = ids if used == Channel.EVENT else empty
    return FusionResult(result.pose, result.degenerate, MODE_OF_CHANNEL[channel], inliers_rgb=inliers_rgb,
                        inliers_event=inliers_event, provenance=provenance, fallback=fell_back, **common)
