"""Sequence bundles and their frame-by-frame replay.

The replay engine mirrors the recording setup: a producer thread feeds the
global event buffer while the consumer closes one window per frame period.
"""
import logging
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterator, List, Optional

import numpy as np

from core.detection import BoundingBox, Detection
from core.errors import InvalidInputError
from core.event_core import (
    EVENT_DTYPE, EventBuffer, EventFrame, PolarityMode, accumulate_frame, check_polarity_mode, slice_window,
)
from core.fusion import ChannelPrediction
from core.geometry import KeypointSet, LandmarkSet, Pose
from db.models import AffineWarp, CameraIntrinsics, Channel, FrameLabel, SequenceMeta

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PredictionStream:
    """Per-frame keypoint predictions of one channel, frames stacked on axis 0.

    present[i] is False when frame i + 1 has no prediction at all.
    """
    channel: Channel
    keypoints: np.ndarray
    valid: np.ndarray
    mc_samples: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        self.channel = Channel(self.channel)
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.mc_samples = np.asarray(self.mc_samples, dtype=float)
        self.present = np.asarray(self.present, dtype=bool)
        n, Z = self.valid.shape
        if self.keypoints.shape != (n, Z, 2) or self.mc_samples.shape[0] != n or self.mc_samples.shape[2:] != (Z, 2):
            raise InvalidInputError(f"inconsistent {self.channel.value} prediction arrays")
        if self.present.shape != (n,):
            raise InvalidInputError(f"presence mask covers {self.present.shape[0]} frames, expected {n}")

    @classmethod
    def from_predictions(cls, channel: Channel, preds: List[Optional[ChannelPrediction]], Z: int, Q: int) -> "PredictionStream":
        n = len(preds)
        keypoints = np.full((n, Z, 2), np.nan)
        valid = np.zeros((n, Z), dtype=bool)
        samples = np.full((n, Q, Z, 2), np.nan)
        present = np.zeros(n, dtype=bool)
        for i, pred in enumerate(preds):
            if pred is None:
                continue
            keypoints[i] = pred.keypoints.points
            valid[i] = pred.keypoints.valid
            samples[i] = pred.mc_samples
            present[i] = True
        return cls(channel, keypoints, valid, samples, present)

    @property
    def n_frames(self) -> int:
        return self.valid.shape[0]

    def frame(self, frame_index: int) -> Optional[ChannelPrediction]:
        i = frame_index - 1
        if i < 0 or i >= self.n_frames or not self.present[i]:
            return None
        return ChannelPrediction(KeypointSet(self.keypoints[i], self.valid[i]), self.mc_samples[i], self.channel)


@dataclass(eq=False)
class SequenceBundle:
    meta: SequenceMeta
    intrinsics: CameraIntrinsics
    warp: AffineWarp
    landmarks: LandmarkSet
    labels: List[FrameLabel]
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))
    detections: Optional[List[Optional[Detection]]] = None
    predictions: Dict[Channel, PredictionStream] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labels) != self.meta.n_frames:
            raise InvalidInputError(f"{len(self.labels)} labels for {self.meta.n_frames} frames")
        if self.detections is not None and len(self.detections) != self.meta.n_frames:
            raise InvalidInputError(f"{len(self.detections)} detections for {self.meta.n_frames} frames")

    def label(self, frame_index: int) -> FrameLabel:
        return self.labels[frame_index - 1]

    def gt_pose(self, frame_index: int) -> Pose:
        label = self.label(frame_index)
        return Pose(np.array(label.q), np.array(label.t))

    def gt_box(self, frame_index: int) -> BoundingBox:
        return BoundingBox(*self.label(frame_index).box)


@dataclass(frozen=True, eq=False)
class ReplayFrame:
    """One frame window of the replay; the event frame is accumulated on first access."""
    frame_index: int
    window_start: int
    window_end: int
    batch: np.ndarray
    label: FrameLabel
    width: int
    height: int
    polarity_mode: PolarityMode = "count"

    @cached_property
    def event_frame(self) -> EventFrame:
        return accumulate_frame(self.batch, self.width, self.height, self.polarity_mode,
                                self.window_start, self.window_end)


def _windows(meta: SequenceMeta):
    for n in range(1, meta.n_frames + 1):
        yield n, meta.frame_timestamp(n - 1), meta.frame_timestamp(n)


def count_outside(events: np.ndarray, meta: SequenceMeta) -> int:
    """Events that no frame window covers."""
    if len(events) == 0:
        return 0
    first, last = meta.frame_timestamp(0), meta.frame_timestamp(meta.n_frames)
    return int(np.sum((events["t"] <= first) | (events["t"] > last)))


def replay(bundle: SequenceBundle, polarity_mode: PolarityMode = "count") -> Iterator[ReplayFrame]:
    """Yields each frame's window (tau_n - dtau, tau_n], its events and label."""
    check_polarity_mode(polarity_mode)
    meta = bundle.meta
    ignored = count_outside(bundle.events, meta)
    if ignored:
        logger.warning(f"{ignored} events fall outside the labelled range and are ignored")
    for n, t0, t1 in _windows(meta):
        batch = slice_window(bundle.events, t0, t1)
        yield ReplayFrame(n, t0, t1, batch, bundle.label(n), meta.width, meta.height, polarity_mode)


class ReplayEngine:
    """Threaded replay: a producer appends the recorded stream chunk by chunk
    into an EventBuffer and the consumer emits a frame whenever the buffer has
    advanced past the frame's closing timestamp.

    Window assignment only depends on timestamps, so the output equals replay().
    """

    def __init__(self, bundle: SequenceBundle, polarity_mode: PolarityMode = "count", chunk_size: int = 4096):
        if chunk_size <= 0:
            raise InvalidInputError(f"chunk_size must be positive, got {chunk_size}")
        check_polarity_mode(polarity_mode)
        self.bundle = bundle
        self.polarity_mode = polarity_mode
        self.chunk_size = chunk_size
        self.buffer = EventBuffer(bundle.meta.width, bundle.meta.height)
        self._progress = threading.Condition()
        self._done = False
        self._error: Optional[BaseException] = None

    def _produce(self):
        events = self.bundle.events
        try:
            for start in range(0, len(events), self.chunk_size):
                self.buffer.append(events[start:start + self.chunk_size])
                with self._progress:
                    self._progress.notify_all()
        except BaseException as exc:
            self._error = exc
        finally:
            with self._progress:
                self._done = True
                self._progress.notify_all()

    def _ready(self, t1: int) -> bool:
        last = self.buffer.last_timestamp
        return self._done or (last is not None and last > t1)

    def __iter__(self) -> Iterator[ReplayFrame]:
        meta = self.bundle.meta
        producer = threading.Thread(target=self._produce, name=f"replay-{meta.name}", daemon=True)
        producer.start()
        try:
            for n, t0, t1 in _windows(meta):
                with self._progress:
                    self._progress.wait_for(lambda: self._ready(t1))
                if self._error is not None:
                    raise self._error
                batch = slice_window(self.buffer, t0, t1)
                yield ReplayFrame(n, t0, t1, batch, self.bundle.label(n), meta.width, meta.height, self.polarity_mode)
        finally:
            producer.join()
        ignored = count_outside(self.buffer.snapshot(), meta)
        if ignored:
            logger.warning(f"{ignored} events fall outside the labelled range and are ignored")
