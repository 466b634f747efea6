"""Event buffers, window slicing and frame accumulation."""
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core.errors import EventBoundsError, InvalidInputError
from core.event_core import (
    EVENT_DTYPE, Event, EventBuffer, EventFrame, accumulate_frame, events_to_array, ignore_polarity, make_events,
    overlay, slice_window,
)


def random_events(n: int, width: int, height: int, duration_us: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(1, duration_us, size=n))
    return make_events(t, rng.integers(0, width, size=n), rng.integers(0, height, size=n), rng.choice([-1, 1], size=n))


def test_event_dtype_layout():
    assert EVENT_DTYPE.itemsize == 16
    assert EVENT_DTYPE.fields["t"][1] == 0
    assert EVENT_DTYPE.fields["x"][1] == 8
    assert EVENT_DTYPE.fields["y"][1] == 10
    assert EVENT_DTYPE.fields["p"][1] == 12


def test_event_rejects_bad_polarity():
    with pytest.raises(InvalidInputError):
        Event(x=0, y=0, p=0, t=0)


class TestSliceWindow:
    def test_half_open_window(self):
        events = events_to_array([Event(0, 0, 1, t) for t in (10, 20, 30, 40)])
        assert slice_window(events, 10, 30)["t"].tolist() == [20, 30]

    def test_empty_input(self):
        assert len(slice_window(np.zeros(0, dtype=EVENT_DTYPE), 0, 100)) == 0

    def test_start_after_end_raises(self):
        with pytest.raises(InvalidInputError):
            slice_window(np.zeros(0, dtype=EVENT_DTYPE), 10, 5)

    def test_windows_partition_a_million_events(self):
        events = random_events(1_000_000, 800, 720, 1_000_000, seed=1)
        bounds = [int(round(n * 1e6 / 30)) for n in range(31)]
        pieces = [slice_window(events, t0, t1) for t0, t1 in zip(bounds[:-1], bounds[1:])]
        assert sum(len(p) for p in pieces) == len(events)
        assert np.array_equal(np.concatenate(pieces), events)

    def test_reads_from_buffer(self):
        buffer = EventBuffer(4, 4, events_to_array([Event(1, 1, 1, t) for t in (5, 6, 7)]))
        assert slice_window(buffer, 5, 7)["t"].tolist() == [6, 7]


class TestAccumulate:
    def test_count_mode_normalizes_by_peak(self):
        batch = events_to_array([Event(1, 1, 1, 1), Event(1, 1, -1, 2), Event(2, 0, 1, 3)])
        frame = accumulate_frame(batch, 3, 2)
        expected = np.zeros((2, 3))
        expected[1, 1] = 1.0
        expected[0, 2] = 0.5
        np.testing.assert_array_equal(frame.values, expected)
        assert not frame.empty

    def test_empty_batch_gives_zero_frame(self):
        for mode in ("count", "signed"):
            frame = accumulate_frame(np.zeros(0, dtype=EVENT_DTYPE), 5, 4, mode)
            assert frame.empty
            assert frame.values.shape == (4, 5)
            assert np.all(frame.values == 0.0)

    def test_single_event(self):
        frame = accumulate_frame(events_to_array([Event(3, 2, 1, 0)]), 5, 4)
        assert frame.values[2, 3] == 1.0
        assert frame.values.sum() == 1.0

    def test_signed_mode_centres_at_half(self):
        batch = events_to_array([Event(1, 1, 1, 1), Event(1, 1, 1, 2), Event(2, 2, -1, 3)])
        frame = accumulate_frame(batch, 4, 4, "signed")
        assert frame.values[1, 1] == 1.0
        assert frame.values[2, 2] == 0.25
        assert frame.values[0, 0] == 0.5

    def test_out_of_bounds_names_the_event(self):
        batch = events_to_array([Event(1, 1, 1, 0), Event(9, 1, 1, 1)])
        with pytest.raises(EventBoundsError) as info:
            accumulate_frame(batch, 5, 5)
        assert info.value.index == 1

    def test_million_events_accumulate_quickly(self):
        events = random_events(1_000_000, 800, 720, 1_000_000, seed=2)
        best = float("inf")
        for _ in range(3):
            start = time.perf_counter()
            accumulate_frame(events, 800, 720)
            best = min(best, time.perf_counter() - start)
        assert best < 0.1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=1, max_value=300), st.integers(min_value=0, max_value=10_000))
    def test_permutation_invariant(self, n, seed):
        events = random_events(n, 16, 12, 1000, seed=seed)
        shuffled = events[np.random.default_rng(seed).permutation(n)]
        for mode in ("count", "signed"):
            a = accumulate_frame(events, 16, 12, mode)
            b = accumulate_frame(shuffled, 16, 12, mode)
            np.testing.assert_allclose(a.values, b.values, atol=1e-12)


class TestIgnorePolarity:
    def test_folds_about_half(self):
        frame = EventFrame(np.array([[0.0, 0.5, 1.0]]), 3, 1, empty=False, polarity_mode="signed")
        np.testing.assert_array_equal(ignore_polarity(frame).values, [[1.0, 0.0, 1.0]])

    def test_idempotent(self):
        batch = random_events(200, 10, 10, 1000, seed=3)
        once = ignore_polarity(accumulate_frame(batch, 10, 10, "signed"))
        twice = ignore_polarity(once)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_empty_signed_frame_becomes_zero_frame(self):
        frame = ignore_polarity(accumulate_frame(np.zeros(0, dtype=EVENT_DTYPE), 4, 3, "signed"))
        assert frame.empty
        assert np.all(frame.values == 0.0)


class TestEventBuffer:
    def test_rejects_time_going_backwards(self):
        buffer = EventBuffer(4, 4, events_to_array([Event(0, 0, 1, 10)]))
        with pytest.raises(InvalidInputError):
            buffer.append(events_to_array([Event(0, 0, 1, 5)]))

    def test_rejects_out_of_bounds(self):
        buffer = EventBuffer(4, 4)
        with pytest.raises(EventBoundsError):
            buffer.append(events_to_array([Event(4, 0, 1, 0)]))

    def test_snapshot_is_read_only(self):
        buffer = EventBuffer(4, 4, events_to_array([Event(0, 0, 1, 1)]))
        snap = buffer.snapshot()
        with pytest.raises(ValueError):
            snap["t"][0] = 5

    def test_readers_see_a_prefix_while_appending(self):
        events = random_events(20_000, 32, 32, 1_000_000, seed=4)
        buffer = EventBuffer(32, 32)
        seen = []

        def produce():
            for start in range(0, len(events), 500):
                buffer.append(events[start:start + 500])

        producer = threading.Thread(target=produce)
        producer.start()
        while producer.is_alive():
            seen.append(buffer.snapshot())
        producer.join()
        for snap in seen:
            assert np.array_equal(snap, events[:len(snap)])
        assert np.array_equal(buffer.snapshot(), events)
        assert buffer.last_timestamp == int(events["t"][-1])


def test_overlay_blends_and_validates():
    frame = EventFrame(np.ones((2, 2)), 2, 2, empty=False)
    np.testing.assert_allclose(overlay(np.zeros((2, 2)), frame, 0.25), np.full((2, 2), 0.25))
    with pytest.raises(InvalidInputError):
        overlay(np.zeros((3, 2)), frame)
