from __future__ import annotations

import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crashdet.collision import (
    CONFIRMED,
    DISCARD,
    PENDING,
    PROCEED,
    REJECTED,
    CollisionCandidate,
    CollisionEstimator,
    CollisionParams,
    average_speed,
    detect_collisions,
    gate_proximity,
    gate_speed,
    predict_center,
    resolve_candidate,
    speed_coefficient,
)
from crashdet.errors import CollisionError
from reference import ReferenceCascade, Snap, entry, random_scene

FRAME_AREA = 480.0 * 360.0


def snap(tid, centers, size=(40, 30), alpha=4.0, start=0):
    w, h = size
    return Snap(tid, alpha, tuple(entry(start + i, cx - w / 2, cy - h / 2, w, h) for i, (cx, cy) in enumerate(centers)))


def straight(tid, start_xy, velocity, frames, **kw):
    return snap(tid, [(start_xy[0] + velocity[0] * i, start_xy[1] + velocity[1] * i) for i in range(frames)], **kw)


def candidate(pred_a, pred_b, created=0):
    return CollisionCandidate((0, 1), created, created + 10, pred_a, pred_b)


class TestSpeedCoefficient:
    def test_car_example(self):
        assert speed_coefficient(172800, 1200, 4) == pytest.approx(36.0, abs=1e-9)

    def test_cancellation(self):
        assert speed_coefficient(172800, 172800 / 4, 4) == pytest.approx(1.0, abs=1e-9)

    def test_inverse_area(self):
        assert speed_coefficient(172800, 2400, 4) == pytest.approx(18.0, abs=1e-9)

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, 0, 1), (1, 1, 0), (1, -2, 1)])
    def test_non_positive_inputs(self, args):
        with pytest.raises(CollisionError):
            speed_coefficient(*args)

    @given(st.floats(1, 1e4), st.floats(1e-2, 1e5), st.floats(0.1, 10))
    def test_coefficient_times_area_is_constant(self, area, other, alpha):
        k1 = speed_coefficient(FRAME_AREA, area, alpha) * area
        k2 = speed_coefficient(FRAME_AREA, other, alpha) * other
        assert k1 == pytest.approx(k2, rel=1e-12)


class TestAverageSpeed:
    def test_hand_evaluated(self):
        # 40x30 car -> coefficient 36; displacement (30, 40) over 10 frames
        track = straight(0, (100, 100), (3, 4), 11)
        est = average_speed(track, FRAME_AREA)
        assert est.coefficient == pytest.approx(36.0, abs=1e-9)
        assert (est.sum_dx, est.sum_dy) == pytest.approx((30.0, 40.0), abs=1e-9)
        assert est.speed == pytest.approx(180.0, abs=1e-9)

    def test_unit_coefficient(self):
        # bbox area = frame_area / alpha gives coefficient 1
        track = straight(0, (0, 0), (1, 0), 11, size=(240, 180), alpha=4.0)
        assert average_speed(track, FRAME_AREA).speed == pytest.approx(1.0, abs=1e-9)

    def test_static(self):
        est = average_speed(snap(0, [(50, 50)] * 12), FRAME_AREA)
        assert est.speed == 0.0 and est.sum_dx == 0.0 and est.sum_dy == 0.0

    def test_short_history_keeps_fixed_denominator(self):
        est = average_speed(straight(0, (0, 0), (2, 0), 4), FRAME_AREA)
        assert est.window == 3
        assert est.speed == pytest.approx(36.0 * 6.0 / 10.0)

    def test_needs_two_entries(self):
        with pytest.raises(CollisionError):
            average_speed(snap(0, [(1, 1)]), FRAME_AREA)

    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-5, 5), st.floats(-5, 5))
    def test_translation_invariant(self, ox, oy, vx, vy):
        a = straight(0, (200, 200), (vx, vy), 12)
        b = straight(0, (200 + ox, 200 + oy), (vx, vy), 12)
        assert average_speed(a, FRAME_AREA).speed == pytest.approx(average_speed(b, FRAME_AREA).speed, abs=1e-9)

    @given(st.floats(0, 8), st.floats(0, 2 * math.pi))
    def test_rotation_invariant(self, norm, angle):
        a = straight(0, (200, 200), (norm, 0), 11)
        b = straight(0, (200, 200), (norm * math.cos(angle), norm * math.sin(angle)), 11)
        assert average_speed(a, FRAME_AREA).speed == pytest.approx(average_speed(b, FRAME_AREA).speed, abs=1e-9)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_zero_iff_no_displacement(self, vx, vy):
        est = average_speed(straight(0, (200, 200), (vx, vy), 11), FRAME_AREA)
        assert (est.speed == 0.0) == (est.sum_dx == 0.0 and est.sum_dy == 0.0)


class TestPrediction:
    def test_hand_evaluated(self):
        track = straight(0, (80, 90), (2, 1), 11)
        assert predict_center(track) == pytest.approx((120.0, 110.0), abs=1e-9)

    def test_static(self):
        assert predict_center(snap(0, [(7, 9)] * 11)) == (7.0, 9.0)

    def test_leftward(self):
        track = straight(0, (60, 50), (-1, 0), 11)
        assert predict_center(track) == pytest.approx((40.0, 50.0), abs=1e-9)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_preserves_motion_angle(self, vx, vy):
        track = straight(0, (200, 200), (vx, vy), 11)
        px, py = predict_center(track)
        cx, cy = track.center
        assert px - cx == pytest.approx(10 * vx, abs=1e-9)
        assert py - cy == pytest.approx(10 * vy, abs=1e-9)


class TestGates:
    @pytest.mark.parametrize("speeds, expected", [((5, 8), DISCARD), ((25, 5), PROCEED), ((20, 3), PROCEED)])
    def test_speed_gate(self, speeds, expected):
        assert gate_speed(*speeds, 20) == expected

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100))
    def test_speed_gate_symmetric(self, a, b, limit):
        assert gate_speed(a, b, limit) == gate_speed(b, a, limit)

    def test_speed_gate_rejects_negative(self):
        with pytest.raises(CollisionError):
            gate_speed(-1, 2, 3)

    @pytest.fixture
    def boxes(self):
        # half-diagonal of a 30x40 box is 25
        return (0, 0, 30, 40), (100, 100, 30, 40)

    def test_proximity_far(self, boxes):
        assert gate_proximity((0, 0), (60, 0), *boxes) == DISCARD

    def test_proximity_near(self, boxes):
        assert gate_proximity((0, 0), (10, 0), *boxes) == PROCEED

    def test_proximity_identical(self, boxes):
        assert gate_proximity((5, 5), (5, 5), *boxes) == PROCEED

    def test_proximity_boundary(self, boxes):
        assert gate_proximity((0, 0), (25, 0), *boxes) == PROCEED


class TestResolve:
    def test_confirmed(self):
        out = resolve_candidate(candidate((0, 0), (20, 0)), (0, 15), (20, 0), 10)
        assert out.status == CONFIRMED
        assert out.diagnostics["max_deviation"] == pytest.approx(15)
        assert out.diagnostics["deviation_threshold"] == pytest.approx(10)

    def test_rejected(self):
        assert resolve_candidate(candidate((0, 0), (20, 0)), (0, 5), (20, 0)).status == REJECTED

    def test_boundary_is_strict(self):
        assert resolve_candidate(candidate((0, 0), (20, 0)), (0, 10), (20, 0)).status == REJECTED

    def test_too_early(self):
        with pytest.raises(CollisionError, match="due"):
            resolve_candidate(candidate((0, 0), (20, 0)), (0, 0), (20, 0), 9)

    def test_only_from_pending(self):
        done = resolve_candidate(candidate((0, 0), (20, 0)), (0, 15), (20, 0))
        with pytest.raises(CollisionError):
            resolve_candidate(done, (0, 0), (0, 0))

    def test_unordered_pair_rejected(self):
        with pytest.raises(CollisionError):
            CollisionCandidate((3, 1), 0, 10, (0, 0), (0, 0))


class TestDetectCollisions:
    @pytest.fixture
    def head_on(self):
        """Two cars closing at 4 px/frame each; they stop dead on contact at frame 20.

        The first candidate (frame 12) resolves only two frames after impact
        and is rejected; the pair's next prediction, made at frame 22 from
        pre-impact motion, confirms at frame 32.
        """
        frames = {}
        for f in range(40):
            a = [(100 + 4 * min(i, 20), 180) for i in range(f + 1)]
            b = [(300 - 4 * min(i, 20), 180) for i in range(f + 1)]
            frames[f] = [snap(0, a[-30:], start=max(0, f - 29)), snap(1, b[-30:], start=max(0, f - 29))]
        return frames

    def _run(self, frames, params=None):
        pending, created, resolved = {}, [], []
        counts = Counter()
        for f in sorted(frames):
            new, done = detect_collisions(frames[f], pending, f, params, counts)
            for c in done:
                del pending[c.pair]
            for c in new:
                pending[c.pair] = c
            created += new
            resolved += done
        return created, resolved, counts

    def test_head_on_confirms(self, head_on):
        created, resolved, counts = self._run(head_on)
        confirmed = [c for c in resolved if c.status == CONFIRMED]
        assert [(c.created_frame, c.due_frame) for c in confirmed] == [(22, 32)]
        assert all(c.due_frame - c.created_frame == 10 for c in created)
        assert counts["confirmed"] == len(confirmed)

    def test_one_pending_per_pair(self, head_on):
        created, _, _ = self._run(head_on)
        spans = sorted((c.created_frame, c.due_frame) for c in created)
        assert all(b[0] >= a[1] for a, b in zip(spans, spans[1:]))

    def test_slow_scene_creates_nothing(self):
        frames = {f: [straight(i, (60 + 80 * i, 100), (0.05, 0), f + 1) for i in range(5)] for f in range(20)}
        created, _, counts = self._run(frames)
        assert created == []
        assert counts["speed_discarded"] == counts["pairs_examined"] > 0

    def test_parallel_lanes_creates_nothing(self):
        frames = {f: [straight(0, (40, 80), (5, 0), f + 1), straight(1, (40, 280), (5, 0), f + 1)] for f in range(20)}
        created, _, counts = self._run(frames)
        assert created == []
        assert counts["proximity_discarded"] > 0

    def test_retired_track_rejects(self, head_on):
        frames = dict(head_on)
        created, _, _ = self._run({f: frames[f] for f in range(16)})
        first = created[0]
        pending = {first.pair: first}
        _, resolved = detect_collisions([frames[first.due_frame][0]], pending, first.due_frame)
        assert resolved[0].status == REJECTED
        assert resolved[0].diagnostics["retired"] is True

    def test_snapshot_frame_mismatch(self, head_on):
        with pytest.raises(CollisionError):
            detect_collisions(head_on[5], {}, 6)

    def test_resolved_diagnostics_complete(self, head_on):
        _, resolved, _ = self._run(head_on)
        keys = {"speed_a", "speed_b", "predicted_distance", "half_diagonal_a", "half_diagonal_b",
                "proximity_threshold", "deviation_a", "deviation_b", "max_deviation", "deviation_threshold"}
        for c in resolved:
            assert keys <= set(c.diagnostics)
            if not c.diagnostics["retired"]:
                assert all(c.diagnostics[k] is not None for k in keys)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_literal_reference(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, n_vehicles=int(rng.integers(2, 7)), n_frames=60)
        ref = ReferenceCascade()
        pending = {}
        for f in range(60):
            new, done = detect_collisions(scene[f], pending, f)
            for c in done:
                del pending[c.pair]
            for c in new:
                pending[c.pair] = c
            r_new, r_done = ref.step(scene[f], f)
            assert [(c.pair, c.created_frame, c.due_frame, c.status) for c in new] == r_new
            assert [(c.pair, c.created_frame, c.due_frame, c.status) for c in done] == r_done

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_independent_of_track_order(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, n_vehicles=5, n_frames=40)
        shuffler = random.Random(seed)
        p1, p2 = {}, {}
        for f in range(40):
            shuffled = list(scene[f])
            shuffler.shuffle(shuffled)
            out1 = detect_collisions(scene[f], p1, f)
            out2 = detect_collisions(shuffled, p2, f)
            assert out1 == out2
            for p, (new, done) in ((p1, out1), (p2, out2)):
                for c in done:
                    del p[c.pair]
                for c in new:
                    p[c.pair] = c


class TestEstimator:
    def test_young_tracks_are_held_back(self):
        est = CollisionEstimator(CollisionParams(min_history=11))
        a = straight(0, (100, 180), (5, 0), 5)
        b = straight(1, (180, 180), (-5, 0), 5)
        new, _ = est.update([a, b], 4)
        assert new == [] and est.counts["pairs_examined"] == 0

    def test_min_history_two_is_literal(self):
        est = CollisionEstimator(CollisionParams(min_history=2))
        a = straight(0, (100, 180), (5, 0), 5)
        b = straight(1, (180, 180), (-5, 0), 5)
        new, _ = est.update([a, b], 4)
        assert new == detect_collisions([a, b], {}, 4)[0]
        assert len(new) == 1 and new[0].status == PENDING

    def test_funnel_counts_consistent(self):
        est = CollisionEstimator()
        rng = np.random.default_rng(5)
        scene = random_scene(rng, 6, 60)
        for f in range(60):
            est.update(scene[f], f)
        c = est.counts
        assert c["pairs_examined"] == c["speed_discarded"] + c["proximity_discarded"] + c["candidates_created"]
        assert c["confirmed"] + c["rejected"] + len(est.pending) == c["candidates_created"]
