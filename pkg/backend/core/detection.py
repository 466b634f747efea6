"""Bounding boxes, detection smoothing and detection-quality metrics."""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidInputError
from core.geometry import KeypointSet

logger = logging.getLogger(__name__)

SCORE_GATE = 0.98
IOU_GATE = 0.6
IOU_SUCCESS = 0.5


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"box coordinates must be finite: {values}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError(f"box {values} has zero or negative extent")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class TrackerState:
    last_good_box: BoundingBox
    last_good_score: float


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def init_state(det: Detection) -> TrackerState:
    return TrackerState(det.box, det.score)


def smooth(state: TrackerState, det: Detection) -> Tuple[TrackerState, Detection]:
    """One step of the score/IoU gate.

    A detection replaces the remembered one only when its score is above 0.98
    and it overlaps the remembered box with IoU above 0.6; otherwise the
    remembered box and score are emitted.
    """
    if det.score > SCORE_GATE and iou(det.box, state.last_good_box) > IOU_GATE:
        return TrackerState(det.box, det.score), det
    return state, Detection(state.last_good_box, state.last_good_score)


class DetectionSmoother:
    """Stateful wrapper around smooth() for one sequence.

    With seed_score_min set, initialization waits for the first detection whose
    score reaches it; detections before that pass through untouched.
    """

    def __init__(self, seed_score_min: Optional[float] = None):
        self.seed_score_min = seed_score_min
        self.state: Optional[TrackerState] = None
        self.n_held = 0

    def update(self, det: Detection) -> Detection:
        if self.state is None:
            if self.seed_score_min is not None and det.score < self.seed_score_min:
                logger.debug(f"deferring tracker seed, score {det.score:.3f} < {self.seed_score_min}")
                return det
            self.state = init_state(det)
            return det
        self.state, emitted = smooth(self.state, det)
        if emitted is not det:
            self.n_held += 1
        return emitted

    def run(self, detections: Iterable[Detection]) -> List[Detection]:
        return [self.update(det) for det in detections]


def derive_box(kps: KeypointSet, tolerance: float = 0.10) -> BoundingBox:
    """Min/max box of the valid keypoints grown by tolerance x extent per side."""
    if tolerance < 0:
        raise InvalidInputError(f"tolerance must be non-negative, got {tolerance}")
    points = kps.points[kps.valid & np.all(np.isfinite(kps.points), axis=1)]
    if len(points) == 0:
        raise InvalidInputError("no valid keypoints to derive a box from")
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = tolerance * (hi - lo)
    return BoundingBox(float(lo[0] - pad[0]), float(lo[1] - pad[1]), float(hi[0] + pad[0]), float(hi[1] + pad[1]))


def detection_metrics(preds: Sequence[BoundingBox], gts: Sequence[BoundingBox], iou_success: float = IOU_SUCCESS) -> Tuple[float, float]:
    """Mean IoU and the share of frames whose IoU exceeds iou_success."""
    if len(preds) != len(gts):
        raise InvalidInputError(f"{len(preds)} predictions for {len(gts)} ground-truth boxes")
    if not preds:
        raise InvalidInputError("no boxes to evaluate")
    scores = np.array([iou(p, g) for p, g in zip(preds, gts)])
    return float(scores.mean()), float(np.mean(scores > iou_success))


def detection_metrics_multi(sequences: Sequence[Tuple[Sequence[BoundingBox], Sequence[BoundingBox]]],
                            iou_success: float = IOU_SUCCESS) -> Tuple[float, float]:
    """Averages mean IoU and success rate per sequence, then across sequences."""
    if not sequences:
        raise InvalidInputError("no sequences to evaluate")
    per_sequence = np.array([detection_metrics(p, g, iou_success) for p, g in sequences])
    return float(per_sequence[:, 0].mean()), float(per_sequence[:, 1].mean())
