from __future__ import annotations

import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crashdet.errors import TrackingError
from crashdet.ingest import Detection, Frame
from crashdet.tracking import (
    EXTRAPOLATE,
    FILTER,
    HistoryEntry,
    Track,
    Tracker,
    TrackerParams,
    associate,
    correlate,
    extrapolate,
    mosse_init,
    mosse_track,
    peak_to_sidelobe,
    tcfi_decide,
)
from reference import brute_force_correlation

BOX = (32, 24)


def render(positions, size=(480, 360), seed=0):
    """Textured rectangles on a lightly noisy background."""
    rng = np.random.default_rng(seed)
    px = (40 + rng.integers(0, 20, (size[1], size[0]))).astype(np.uint8)
    for x, y in positions:
        x, y = int(round(x)), int(round(y))
        px[y:y + BOX[1], x:x + BOX[0]] = 200
        px[y + 6:y + 12, x + 4:x + 12] = 90
    return px


def square_frame(shift=(0, 0), size=64, side=16):
    px = np.zeros((size, size), dtype=np.float32)
    x0 = size // 2 - side // 2 + shift[0]
    y0 = size // 2 - side // 2 + shift[1]
    px[y0:y0 + side, x0:x0 + side] = 255.0
    return px


def make_track(centers, tid=0, size=(20, 10), alpha=4.0, start=0):
    hist = deque(maxlen=30)
    for i, (cx, cy) in enumerate(centers):
        hist.append(HistoryEntry.of(start + i, (cx - size[0] / 2, cy - size[1] / 2, size[0], size[1])))
    return Track(tid, "car", alpha, hist)


def brute_shift(a, b, max_shift=6):
    """Integer shift of ``b`` relative to ``a`` maximizing the spatial cross-correlation."""
    best, arg = -math.inf, (0, 0)
    za, zb = a - a.mean(), b - b.mean()
    h, w = a.shape
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            ys, xs = slice(max(0, -dy), min(h, h - dy)), slice(max(0, -dx), min(w, w - dx))
            ys2, xs2 = slice(max(0, dy), min(h, h + dy)), slice(max(0, dx), min(w, w + dx))
            score = float(np.sum(za[ys, xs] * zb[ys2, xs2]))
            if score > best:
                best, arg = score, (dx, dy)
    return arg


class TestCorrelation:
    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=5, deadline=None)
    def test_fft_matches_brute_force_on_16x16(self, seed):
        rng = np.random.default_rng(seed)
        img, ker = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
        assert np.max(np.abs(correlate(img, ker) - brute_force_correlation(img, ker))) <= 1e-6

    def test_psr_of_sharp_peak_is_large(self):
        resp = np.random.default_rng(0).normal(0, 0.01, (64, 64))
        resp[32, 32] = 1.0
        psr, peak = peak_to_sidelobe(resp)
        assert peak == (32, 32)
        assert psr > 50

    def test_psr_of_flat_response(self):
        psr, _ = peak_to_sidelobe(np.zeros((32, 32)))
        assert psr == 0.0


class TestMosse:
    @pytest.fixture
    def bbox(self):
        return (16.0, 16.0, 32.0, 32.0)

    def test_self_correlation_has_no_offset(self, bbox):
        frame = square_frame()
        filt = mosse_init(frame, bbox, np.random.default_rng(0))
        dx, dy, psr = filt.locate(frame, bbox)
        assert abs(dx) < 0.5 and abs(dy) < 0.5
        assert psr > 5.7

    def test_degenerate_bbox(self):
        with pytest.raises(TrackingError, match="degenerate"):
            mosse_init(square_frame(), (10, 10, 4, 4))

    def test_bbox_outside_frame(self):
        with pytest.raises(TrackingError):
            mosse_init(square_frame(), (100, 100, 10, 10))

    @pytest.mark.parametrize("shift", [(3, 0), (2, 1), (-2, 2), (0, -3)])
    def test_shift_matches_spatial_argmax(self, bbox, shift):
        first, second = square_frame(), square_frame(shift)
        truth = brute_shift(first, second)
        assert truth == shift
        filt = mosse_init(first, bbox, np.random.default_rng(1))
        new_bbox, psr = mosse_track(filt, second, bbox)
        assert abs(new_bbox[0] - bbox[0] - truth[0]) <= 1.0
        assert abs(new_bbox[1] - bbox[1] - truth[1]) <= 1.0

    def test_noise_frame_has_low_psr(self, bbox):
        filt = mosse_init(square_frame(), bbox, np.random.default_rng(0))
        noise = np.random.default_rng(7).uniform(0, 255, (64, 64)).astype(np.float32)
        _, psr = mosse_track(filt, noise, bbox)
        assert psr < 5.7

    def test_accumulator_shapes_follow_window(self, bbox):
        filt = mosse_init(square_frame(), bbox, params=TrackerParams(window=32))
        assert filt.numerator.shape == filt.denominator.shape == (32, 32)

    @pytest.mark.parametrize("speed", [1, 2, 3, 4])
    def test_translating_square_stays_within_one_pixel(self, speed):
        tracker = Tracker(TrackerParams(), seed=0)
        tracker.step(Frame(0, render([(60, 150)])), [Detection(0, "car", (60, 150, *BOX), 0.9)])
        for f in range(1, 31):
            snaps = tracker.step(Frame(f, render([(60 + speed * f, 150)])), None)
            assert len(snaps) == 1
            x, y = snaps[0].bbox[:2]
            assert math.hypot(x - (60 + speed * f), y - 150) <= 1.0


class TestAssociation:
    @staticmethod
    def _track(tid, bbox):
        return Track(tid, "car", 4.0, deque([HistoryEntry.of(0, bbox)], maxlen=30))

    def test_single_pair(self):
        t = self._track(0, (0, 0, 10, 10))
        d = Detection(1, "car", (0, 0, 10, 8), 0.9)
        assert associate([t], [d]) == ([(0, 0)], [], [])

    def test_greedy_prefers_higher_iou(self):
        t = self._track(0, (0, 0, 10, 10))
        d_hi = Detection(1, "car", (0, 0, 10, 6), 0.9)   # IoU 0.6
        d_lo = Detection(1, "car", (0, 0, 10, 5), 0.9)   # IoU 0.5
        matches, unmatched_d, _ = associate([t], [d_lo, d_hi])
        assert matches == [(0, 1)]
        assert unmatched_d == [0]

    def test_two_by_two_greedy(self):
        from crashdet.geometry import iou

        a = self._track(0, (0, 0, 10, 10))
        b = self._track(1, (0, 10, 10, 10))
        x = Detection(1, "car", (0, 0, 10, 7), 0.9)
        y = Detection(1, "car", (0, 4, 10, 12), 0.9)
        # A-X is the best pair overall, so greedy takes it first and leaves B-Y
        table = {(t.id, j): iou(t.bbox, d.bbox) for t in (a, b) for j, d in enumerate((x, y))}
        assert table[(0, 0)] > table[(0, 1)] and table[(0, 0)] > table[(1, 0)]
        matches, _, _ = associate([a, b], [x, y])
        assert sorted(matches) == [(0, 0), (1, 1)]

    def test_floor(self):
        t = self._track(0, (0, 0, 10, 10))
        d = Detection(1, "car", (8, 8, 10, 10), 0.9)
        assert associate([t], [d]) == ([], [0], [0])

    def test_mixed_frames(self):
        with pytest.raises(TrackingError):
            associate([], [Detection(0, "car", (0, 0, 1, 1), 0.5), Detection(1, "car", (0, 0, 1, 1), 0.5)])


class TestTcfi:
    def test_short_history_filters(self):
        assert tcfi_decide(make_track([(10, 10), (10, 10)]), 5.0) == FILTER

    def test_static_track_extrapolates_after_filter(self):
        assert tcfi_decide(make_track([(50, 50)] * 30), 5.0) == EXTRAPOLATE

    def test_static_track_filters_after_extrapolating(self):
        track = make_track([(50, 50)] * 30)
        track.extrapolated_streak = 1
        assert tcfi_decide(track, 5.0) == FILTER

    def test_fast_track_filters(self):
        # per-frame speed = coef * 1 px; coef = 172800 / (4 * 200) = 216, so min_speed = 72 is a third of it
        track = make_track([(50 + i, 50) for i in range(10)])
        assert tcfi_decide(track, 72.0) == FILTER

    def test_static_pattern_alternates(self):
        track = make_track([(50, 50)] * 30)
        pattern = []
        for _ in range(10):
            d = tcfi_decide(track, 5.0)
            pattern.append(d[0])
            track.extrapolated_streak = track.extrapolated_streak + 1 if d == EXTRAPOLATE else 0
        assert "".join(pattern) == "EFEFEFEFEF"
        assert pattern.count("F") == 5

    def test_longer_stride(self):
        track = make_track([(50, 50)] * 30)
        pattern = []
        for _ in range(6):
            d = tcfi_decide(track, 5.0, stride=3)
            pattern.append(d[0])
            track.extrapolated_streak = track.extrapolated_streak + 1 if d == EXTRAPOLATE else 0
        assert "".join(pattern) == "EEFEEF"


class TestExtrapolate:
    def test_mean_displacement(self):
        track = make_track([(100, 100), (102, 100), (104, 100)])
        x, y, w, h = extrapolate(track)
        assert (x + w / 2, y + h / 2) == pytest.approx((106, 100))
        assert (w, h) == (20, 10)

    def test_static(self):
        track = make_track([(30, 40)] * 5)
        assert extrapolate(track) == track.bbox

    def test_single_entry(self):
        with pytest.raises(TrackingError):
            extrapolate(make_track([(1, 1)]))


class TestTrackerStep:
    @pytest.fixture
    def two_static(self):
        tracker = Tracker(TrackerParams(), seed=0)
        positions = [(100, 100), (300, 200)]
        tracker.step(Frame(0, render(positions)), [Detection(0, "car", (x, y, *BOX), 0.9) for x, y in positions])
        return tracker, positions

    def test_spawn_assigns_fresh_id(self):
        tracker = Tracker()
        snaps = tracker.step(Frame(0, render([(50, 50)])), [Detection(0, "car", (50, 50, *BOX), 0.9)])
        assert [s.id for s in snaps] == [0]

    def test_static_tracks_halve_filter_calls(self, two_static):
        tracker, positions = two_static
        for f in range(1, 11):
            tracker.step(Frame(f, render(positions)), None)
        warm = tracker.mosse_calls
        for f in range(11, 21):
            tracker.step(Frame(f, render(positions)), None)
        assert tracker.mosse_calls - warm == 10

    def test_static_bound_from_spawn(self, two_static):
        tracker, positions = two_static
        frames = 20
        for f in range(1, frames + 1):
            tracker.step(Frame(f, render(positions)), None)
        assert tracker.mosse_calls <= 2 * (math.ceil(frames / 2) + 2)

    def test_tcfi_off_filters_every_frame(self):
        tracker = Tracker(TrackerParams(tcfi=False), seed=0)
        tracker.step(Frame(0, render([(100, 100)])), [Detection(0, "car", (100, 100, *BOX), 0.9)])
        for f in range(1, 11):
            tracker.step(Frame(f, render([(100, 100)])), None)
        assert tracker.mosse_calls == 10

    def test_fast_track_filters_every_frame(self):
        tracker = Tracker(TrackerParams(), seed=0)
        tracker.step(Frame(0, render([(40, 100)])), [Detection(0, "car", (40, 100, *BOX), 0.9)])
        for f in range(1, 16):
            tracker.step(Frame(f, render([(40 + 3 * f, 100)])), None)
        assert tracker.mosse_calls == 15

    def test_unmatched_track_retires_after_max_missed(self):
        tracker = Tracker(TrackerParams(), seed=0)
        tracker.step(Frame(0, render([(100, 100)])), [Detection(0, "car", (100, 100, *BOX), 0.9)])
        for f in range(1, 10):
            assert len(tracker.step(Frame(f, render([(100, 100)])), [])) == 1
        assert tracker.step(Frame(10, render([(100, 100)])), []) == []

    def test_frame_regression(self, two_static):
        tracker, positions = two_static
        with pytest.raises(TrackingError):
            tracker.step(Frame(5, render(positions)), None)

    def test_history_capped_at_thirty(self, two_static):
        tracker, positions = two_static
        for f in range(1, 41):
            snaps = tracker.step(Frame(f, render(positions)), None)
        assert all(len(s.history) == 30 for s in snaps)

    @given(st.lists(st.booleans(), min_size=5, max_size=25))
    @settings(max_examples=15, deadline=None)
    def test_ids_never_reused_and_history_increasing(self, spawn_flags):
        tracker = Tracker(TrackerParams(), seed=0)
        retired, alive = set(), set()
        for f, spawn in enumerate(spawn_flags):
            x = 20 + 30 * (f % 12)
            dets = [Detection(f, "car", (x, 60 + 40 * (f % 6), *BOX), 0.9)] if spawn else []
            snaps = tracker.step(Frame(f, render([d.bbox[:2] for d in dets])), dets)
            now = {s.id for s in snaps}
            assert not now & retired
            retired |= alive - now
            alive = now
            for s in snaps:
                idx = [e.frame_index for e in s.history]
                assert all(b > a for a, b in zip(idx, idx[1:]))
