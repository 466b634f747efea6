# models.py
import re
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

FrameRange = Tuple[int, int]

SEQUENCE_NAME_PATTERN = re.compile(r"^[a-z0-9]+-[0-9]+-(close|far)$")


class Channel(str, Enum):
    RGB = "rgb"
    EVENT = "event"


class FusionMode(str, Enum):
    FUSED = "fused"
    RGB_ONLY = "rgb_only"
    EVENT_ONLY = "event_only"


class PipelineMode(str, Enum):
    FUSION = "fusion"
    FUSION_NO_GATE = "fusion_no_gate"
    RGB_ONLY = "rgb_only"
    EVENT_ONLY = "event_only"


def _check_ranges(ranges: List[FrameRange], n_frames: int, label: str) -> None:
    for start, end in ranges:
        if start > end:
            raise ValueError(f"{label} range ({start}, {end}) has start after end")
        if start < 1 or end > n_frames:
            raise ValueError(f"{label} range ({start}, {end}) outside [1, {n_frames}]")


def frames_in_ranges(ranges: List[FrameRange]) -> set:
    """Expands inclusive frame ranges into a set of frame indices."""
    frames = set()
    for start, end in ranges:
        frames.update(range(start, end + 1))
    return frames


# --- Camera Models ---
class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(..., gt=0, description="Focal length along x in pixels")
    fy: float = Field(..., gt=0, description="Focal length along y in pixels")
    cx: float = Field(..., description="Principal point column in pixels")
    cy: float = Field(..., description="Principal point row in pixels")
    dist: Tuple[float, float, float, float, float] = Field(
        (0.0, 0.0, 0.0, 0.0, 0.0),
        description="Brown-Conrady coefficients in the order (k1, k2, k3, p1, p2)",
    )

    @field_validator("dist")
    @classmethod
    def _finite_dist(cls, value):
        if not all(np.isfinite(value)):
            raise ValueError("distortion coefficients must be finite")
        return value

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in self.dist)


class AffineWarp(BaseModel):
    """Event-to-RGB pixel alignment: x' = sx*x + kx*y + tx, y' = ky*x + sy*y + ty.

    kx and ky stay 0 for the translation + scale form; they are only populated by
    the general affine fit.
    """
    model_config = ConfigDict(frozen=True)

    sx: float = Field(1.0, gt=0, description="Scale along x (dimensionless)")
    sy: float = Field(1.0, gt=0, description="Scale along y (dimensionless)")
    tx: float = Field(0.0, description="Translation along x in pixels")
    ty: float = Field(0.0, description="Translation along y in pixels")
    kx: float = Field(0.0, description="Off-diagonal x term (general affine only)")
    ky: float = Field(0.0, description="Off-diagonal y term (general affine only)")

    @classmethod
    def identity(cls) -> "AffineWarp":
        return cls()

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.sx, self.kx, self.tx], [self.ky, self.sy, self.ty]])

    def inverse(self) -> "AffineWarp":
        linear = np.array([[self.sx, self.kx], [self.ky, self.sy]])
        inv = np.linalg.inv(linear)
        shift = -inv @ np.array([self.tx, self.ty])
        return AffineWarp(
            sx=float(inv[0, 0]), kx=float(inv[0, 1]), tx=float(shift[0]),
            ky=float(inv[1, 0]), sy=float(inv[1, 1]), ty=float(shift[1]),
        )


# --- Estimation Configs ---
class RansacConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(10_000, ge=1, description="Maximum number of RANSAC hypotheses")
    reproj_threshold: float = Field(20.0, gt=0, description="Inlier reprojection threshold in pixels")
    min_inliers: int = Field(4, ge=4, description="Below this consensus the result is degenerate")
    sample_size: int = Field(4, ge=4, description="Correspondences per hypothesis")
    seed: int = Field(0, ge=0, description="Seed of the hypothesis streams")
    confidence: Optional[float] = Field(
        0.999, gt=0, le=1,
        description="Stop once an all-inlier sample was drawn with this probability; None runs every iteration",
    )
    gn_iters: int = Field(5, ge=0, description="Gauss-Newton iterations on the EPnP betas")
    refit: bool = Field(True, description="Refit EPnP on the consensus set")

    @model_validator(mode="after")
    def _sample_fits_consensus(self):
        if self.min_inliers < self.sample_size:
            raise ValueError("min_inliers must be at least sample_size")
        return self


class FusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(0.2, ge=0, description="CMKD threshold as a fraction of the box diagonal")
    gate: bool = Field(True, description="Apply the CMKD consistency gate")
    force_channel: Optional[Channel] = Field(None, description="Bypass arbitration and use this channel")
    u_aggregate: Literal["mean", "median"] = Field("mean", description="Aggregation of per-landmark spreads")
    fallback: bool = Field(True, description="Try the other channel when the selected one is degenerate")


class SuccessConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho: float = Field(0.010, gt=0, description="Position success threshold in meters")
    sigma: float = Field(10.0, gt=0, description="Orientation success threshold in degrees")


# --- Simulation Models ---
class NoiseModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_sigma: float = Field(0.0, ge=0, description="Gaussian keypoint noise on clean frames (px)")
    corrupt_fraction: float = Field(
        0.0, ge=0, le=1,
        description="Share of the keypoints still valid after dropping that are displaced on corrupt frames",
    )
    corrupt_offset: float = Field(0.0, ge=0, description="Displacement length of corrupted keypoints (px)")
    clustered: bool = Field(False, description="Displace corrupted keypoints along one common direction")
    mc_sigma_clean: float = Field(0.0, ge=0, description="MC sample spread on clean frames (px)")
    mc_sigma_corrupt: float = Field(0.0, ge=0, description="MC sample spread on corrupt frames (px)")
    invalid_fraction_corrupt: float = Field(0.0, ge=0, le=1, description="Share of all Z keypoints dropped on corrupt frames")

    @classmethod
    def default_rgb(cls) -> "NoiseModel":
        return cls(base_sigma=0.5, corrupt_fraction=0.6, corrupt_offset=150.0, clustered=False,
                   mc_sigma_clean=1.0, mc_sigma_corrupt=5.0, invalid_fraction_corrupt=0.85)

    @classmethod
    def default_event(cls) -> "NoiseModel":
        return cls(base_sigma=0.75, corrupt_fraction=0.6, corrupt_offset=150.0, clustered=False,
                   mc_sigma_clean=1.5, mc_sigma_corrupt=6.0, invalid_fraction_corrupt=0.85)


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field("satty-1-close", description="Sequence name <object>-<trajectory_index>-<distance>")
    Z: int = Field(18, ge=4, description="Landmark count")
    object_extent: float = Field(0.3, gt=0, description="Edge length of the landmark bounding cube (m)")
    symmetric_landmarks: bool = Field(False, description="Mirror half of the landmarks across the y-z plane")
    distance: Literal["close", "far"] = "close"
    distance_m: Dict[str, float] = Field({"close": 0.8, "far": 1.2}, description="Nominal range per distance setting (m)")
    fps: float = Field(30.0, gt=0, description="Frame rate")
    n_frames: int = Field(300, ge=1)
    rotation_rate: float = Field(1.0, gt=0, description="Degrees per frame")
    x_interval_deg: float = Field(20.0, ge=0, description="Size of each x-axis step between y revolutions")
    low_motion_rate_scale: float = Field(1.0, ge=0, description="Rate multiplier inside low-motion ranges")
    harsh_ranges: List[FrameRange] = Field(default_factory=list)
    low_motion_ranges: List[FrameRange] = Field(default_factory=list)
    noise_rgb: NoiseModel = Field(default_factory=NoiseModel.default_rgb)
    noise_event: NoiseModel = Field(default_factory=NoiseModel.default_event)
    mc_samples: int = Field(32, ge=2, description="Q, MC samples per channel prediction")
    width: int = Field(800, ge=1)
    height: int = Field(720, ge=1)
    intrinsics: CameraIntrinsics = Field(default_factory=lambda: CameraIntrinsics(fx=1000.0, fy=1000.0, cx=400.0, cy=360.0))
    warp: AffineWarp = Field(default_factory=AffineWarp.identity, description="Event-to-RGB alignment")
    apply_distortion: bool = False
    det_jitter_px: float = Field(2.0, ge=0)
    det_collapse_score: float = Field(0.3, ge=0, le=1)
    det_drift_px: float = Field(120.0, ge=0)
    render_events: bool = Field(True, description="Render intensity frames and synthesize an event stream")
    contrast_threshold: float = Field(0.2, gt=0, description="Log-intensity contrast threshold")
    seed: int = 7

    @model_validator(mode="after")
    def _ranges_within_sequence(self):
        _check_ranges(self.harsh_ranges, self.n_frames, "harsh")
        _check_ranges(self.low_motion_ranges, self.n_frames, "low-motion")
        if self.distance not in self.distance_m:
            raise ValueError(f"no nominal range for distance '{self.distance}'")
        return self

    @classmethod
    def preset(cls, object_id: str, trajectory_index: int, distance: str, n_frames: int = 300, **overrides) -> "ScenarioConfig":
        """Builds one of the recorded-sequence analogues.

        Harsh lighting covers the second sixth to the half of the sequence and
        low motion the following third; trajectory 2 overlaps the two periods.
        """
        objects = {
            "satty": {"Z": 18, "object_extent": 0.18, "distance_m": {"close": 0.3, "far": 0.7}},
            "cassini": {"Z": 18, "object_extent": 0.3, "distance_m": {"close": 0.8, "far": 1.2}},
            "soho": {"Z": 24, "object_extent": 0.3, "distance_m": {"close": 0.8, "far": 1.2}, "symmetric_landmarks": True},
        }
        if object_id not in objects:
            raise ValueError(f"Unknown object: {object_id}. Use one of {sorted(objects)}.")
        third = max(1, n_frames // 3)
        harsh_start = max(1, n_frames // 6)
        harsh = (harsh_start, min(n_frames, harsh_start + third - 1))
        if trajectory_index == 2:
            low = (harsh[0] + third // 3, min(n_frames, harsh[1] + third // 3))
        else:
            low = (min(n_frames, harsh[1] + 1), min(n_frames, harsh[1] + third))
        params = {
            **objects[object_id],
            "name": f"{object_id}-{trajectory_index}-{distance}",
            "distance": distance,
            "n_frames": n_frames,
            "harsh_ranges": [harsh],
            "low_motion_ranges": [low],
            "seed": 1000 * trajectory_index + (0 if distance == "close" else 1),
        }
        params.update(overrides)
        return cls(**params)


# --- Dataset Models ---
class SequenceMeta(BaseModel):
    name: str = Field(..., description="<object>-<trajectory_index>-<distance>")
    fps: float = Field(..., gt=0)
    n_frames: int = Field(..., ge=1)
    width: int = Field(..., ge=1, description="Sensor width in pixels")
    height: int = Field(..., ge=1, description="Sensor height in pixels")
    harsh_ranges: List[FrameRange] = Field(default_factory=list)
    low_motion_ranges: List[FrameRange] = Field(default_factory=list)
    Z: int = Field(..., ge=4)
    object_id: str
    t0_us: int = Field(0, ge=0, description="Stream origin; frame n closes its window at t0 + n/fps")

    @field_validator("name")
    @classmethod
    def _name_grammar(cls, value: str) -> str:
        if not SEQUENCE_NAME_PATTERN.match(value):
            raise ValueError(f"sequence name '{value}' does not match <object>-<trajectory_index>-<distance>")
        return value

    @model_validator(mode="after")
    def _ranges_within_sequence(self):
        _check_ranges(self.harsh_ranges, self.n_frames, "harsh")
        _check_ranges(self.low_motion_ranges, self.n_frames, "low-motion")
        return self

    def frame_timestamp(self, n: int) -> int:
        """tau_n in microseconds, computed from n directly so no drift accumulates."""
        return self.t0_us + int(round(n * 1e6 / self.fps))

    def harsh_frames(self) -> set:
        return frames_in_ranges(self.harsh_ranges)

    def low_motion_frames(self) -> set:
        return frames_in_ranges(self.low_motion_ranges)

    def adverse_frames(self) -> set:
        return self.harsh_frames() | self.low_motion_frames()


class FrameLabel(BaseModel):
    frame_index: int = Field(..., ge=1)
    q: Tuple[float, float, float, float] = Field(..., description="Ground-truth orientation (w, x, y, z)")
    t: Tuple[float, float, float] = Field(..., description="Ground-truth translation (m)")
    keypoints: List[Tuple[float, float]] = Field(..., description="Projected landmarks in RGB pixels")
    keypoints_valid: List[bool]
    box: Tuple[float, float, float, float] = Field(..., description="x_min, y_min, x_max, y_max")
    harsh: bool = False
    low_motion: bool = False
    image_path: Optional[str] = Field(None, description="Opaque RGB frame reference kept for provenance")


class FusionRecord(BaseModel):
    # One JSON line per processed frame
    frame: int
    mode: FusionMode
    provenance: str
    fallback: bool = False
    degenerate: bool
    reason: Optional[str] = None
    q: Tuple[float, float, float, float]
    t: Tuple[float, float, float]
    cmkd: Optional[float] = None
    threshold_E: Optional[float] = None
    u_rgb: Optional[float] = None
    u_event: Optional[float] = None
    n_inliers_rgb: int = 0
    n_inliers_event: int = 0
    n_events: int = Field(0, ge=0, description="Events in the frame window")
