"""Event storage, time-window slicing and event-to-frame accumulation."""
import logging
import threading
from dataclasses import dataclass
from typing import Iterable, Literal, Optional

import numpy as np

from core.errors import EventBoundsError, InvalidInputError

logger = logging.getLogger(__name__)

# 16-byte little-endian record: t u64, x u16, y u16, p i8, 3 pad bytes
EVENT_DTYPE = np.dtype(
    {"names": ["t", "x", "y", "p"], "formats": ["<u8", "<u2", "<u2", "i1"], "offsets": [0, 8, 10, 12], "itemsize": 16}
)

PolarityMode = Literal["count", "signed", "invariant"]


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    p: int
    t: int

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise InvalidInputError(f"polarity must be -1 or +1, got {self.p}")
        if self.x < 0 or self.y < 0 or self.t < 0:
            raise InvalidInputError(f"event fields must be non-negative: {self}")


def make_events(t, x, y, p) -> np.ndarray:
    """Packs column arrays into an EVENT_DTYPE batch."""
    t = np.asarray(t)
    batch = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    batch["t"] = t
    batch["x"] = np.asarray(x)
    batch["y"] = np.asarray(y)
    batch["p"] = np.asarray(p)
    return batch


def events_to_array(events: Iterable[Event]) -> np.ndarray:
    events = list(events)
    return make_events(
        [e.t for e in events], [e.x for e in events], [e.y for e in events], [e.p for e in events]
    )


def check_polarity_mode(polarity_mode: str) -> None:
    """Only count and signed frames can be accumulated."""
    if polarity_mode not in ("count", "signed"):
        raise InvalidInputError(f"unknown polarity mode '{polarity_mode}'")


def check_bounds(batch: np.ndarray, width: int, height: int) -> None:
    """Raises EventBoundsError naming the first event outside the sensor."""
    if len(batch) == 0:
        return
    outside = (batch["x"] >= width) | (batch["y"] >= height)
    if np.any(outside):
        idx = int(np.argmax(outside))
        raise EventBoundsError(idx, int(batch["x"][idx]), int(batch["y"][idx]), width, height)


class EventBuffer:
    """Append-only event store for one producer and any number of readers.

    Readers work on snapshots, i.e. immutable views of the committed prefix.
    """

    def __init__(self, width: int, height: int, events: Optional[np.ndarray] = None):
        if width <= 0 or height <= 0:
            raise InvalidInputError(f"invalid sensor size {width}x{height}")
        self.width = width
        self.height = height
        self._lock = threading.Lock()
        self._chunks = []
        self._events = np.zeros(0, dtype=EVENT_DTYPE)
        if events is not None:
            self.append(events)

    def __len__(self) -> int:
        with self._lock:
            return len(self._events) + sum(len(c) for c in self._chunks)

    @property
    def last_timestamp(self) -> Optional[int]:
        with self._lock:
            if self._chunks:
                return int(self._chunks[-1]["t"][-1])
            return int(self._events["t"][-1]) if len(self._events) else None

    def append(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=EVENT_DTYPE)
        if len(batch) == 0:
            return
        check_bounds(batch, self.width, self.height)
        if not np.all(np.isin(batch["p"], (-1, 1))):
            raise InvalidInputError("polarity must be -1 or +1")
        if np.any(np.diff(batch["t"].astype(np.int64)) < 0):
            raise InvalidInputError("event timestamps must be non-decreasing")
        with self._lock:
            last = None
            if self._chunks:
                last = self._chunks[-1]["t"][-1]
            elif len(self._events):
                last = self._events["t"][-1]
            if last is not None and batch["t"][0] < last:
                raise InvalidInputError(f"batch starts at {batch['t'][0]} before the buffer end {last}")
            self._chunks.append(batch.copy())

    def snapshot(self) -> np.ndarray:
        """Returns a read-only array of every committed event."""
        with self._lock:
            if self._chunks:
                self._events = np.concatenate([self._events, *self._chunks])
                self._events.flags.writeable = False
                self._chunks = []
            return self._events


@dataclass(frozen=True, eq=False)
class EventFrame:
    values: np.ndarray
    width: int
    height: int
    window_start: int = 0
    window_end: int = 0
    empty: bool = True
    polarity_mode: PolarityMode = "count"

    @classmethod
    def zeros(cls, width: int, height: int, window_start: int = 0, window_end: int = 0, polarity_mode: PolarityMode = "count"):
        return cls(np.zeros((height, width)), width, height, window_start, window_end, True, polarity_mode)


def slice_window(events, t0: int, t1: int) -> np.ndarray:
    """Events with t0 < t <= t1, order preserved."""
    if t0 > t1:
        raise InvalidInputError(f"window start {t0} is after its end {t1}")
    if isinstance(events, EventBuffer):
        events = events.snapshot()
    ts = events["t"]
    lo = np.searchsorted(ts, t0, side="right")
    hi = np.searchsorted(ts, t1, side="right")
    return events[lo:hi]


def accumulate_frame(batch: np.ndarray, width: int, height: int, polarity_mode: PolarityMode = "count",
                     window_start: int = 0, window_end: int = 0) -> EventFrame:
    """Builds a max-normalized 2D histogram of the batch.

    In signed mode the per-pixel polarity sum is mapped affinely so that zero
    activity sits at 0.5.
    """
    check_polarity_mode(polarity_mode)
    batch = np.asarray(batch, dtype=EVENT_DTYPE)
    if len(batch) == 0:
        return EventFrame.zeros(width, height, window_start, window_end, polarity_mode)
    check_bounds(batch, width, height)

    flat = batch["y"].astype(np.int64) * width + batch["x"].astype(np.int64)
    if polarity_mode == "count":
        hist = np.bincount(flat, minlength=width * height).astype(float)
        values = hist / hist.max()
    else:
        sums = np.bincount(flat, weights=batch["p"].astype(float), minlength=width * height)
        peak = np.abs(sums).max()
        values = 0.5 + sums / (2.0 * peak) if peak > 0 else np.full(width * height, 0.5)
    values = values.reshape(height, width)
    return EventFrame(values, width, height, window_start, window_end, False, polarity_mode)


def ignore_polarity(frame: EventFrame) -> EventFrame:
    """Folds a signed frame about 0.5 so both polarities read as activity."""
    if frame.polarity_mode != "signed":
        return frame
    if frame.empty:
        return EventFrame.zeros(frame.width, frame.height, frame.window_start, frame.window_end, "invariant")
    folded = np.abs(frame.values - 0.5) * 2.0
    peak = folded.max()
    if peak > 0:
        folded = folded / peak
    return EventFrame(
        np.clip(folded, 0.0, 1.0), frame.width, frame.height, frame.window_start, frame.window_end,
        empty=not bool(peak > 0), polarity_mode="invariant",
    )


def overlay(image: np.ndarray, frame: EventFrame, weight: float = 0.5) -> np.ndarray:
    """Blends an event frame onto a grayscale image of the same size (values in [0, 1])."""
    image = np.asarray(image, dtype=float)
    if image.shape != frame.values.shape:
        raise InvalidInputError(f"image shape {image.shape} does not match frame {frame.values.shape}")
    if not 0.0 <= weight <= 1.0:
        raise InvalidInputError(f"weight must lie in [0, 1], got {weight}")
    return np.clip((1.0 - weight) * image + weight * frame.values, 0.0, 1.0)
