"""Collision estimation cascade.

Speeds are normalized across camera heights by a per-vehicle coefficient
(frame area over class-weighted box area).  Every pair of tracks then passes
four gates: at least one vehicle fast, predicted centers ten frames ahead
close together, and, once those ten frames have elapsed, at least one vehicle
far enough from where it was predicted to be.  The last gate separates real
impacts from vehicles that merely overlap in a low-angle projection.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import WORKING_RESOLUTION
from .errors import CollisionError
from .geometry import Point, area, distance, half_diagonal

log = logging.getLogger(__name__)

PROCEED = "PROCEED"
DISCARD = "DISCARD"
PENDING = "PENDING"
CONFIRMED = "CONFIRMED"
REJECTED = "REJECTED"

FUNNEL_KEYS = (
    "pairs_examined",
    "speed_discarded",
    "proximity_discarded",
    "candidates_created",
    "confirmed",
    "rejected",
)


@dataclass
class CollisionParams:
    speed_limit: float = 30.0
    horizon: int = 10
    speed_window: int = 10
    # tracks join the cascade once their speed window is full (see CollisionEstimator)
    min_history: int = 11
    frame_area: float = float(WORKING_RESOLUTION[0] * WORKING_RESOLUTION[1])


@dataclass(frozen=True)
class SpeedEstimate:
    track_id: int
    coefficient: float
    sum_dx: float
    sum_dy: float
    speed: float
    window: int


@dataclass(frozen=True)
class CollisionCandidate:
    pair: Tuple[int, int]
    created_frame: int
    due_frame: int
    predicted_center_a: Point
    predicted_center_b: Point
    status: str = PENDING
    diagnostics: Dict[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.pair[0] >= self.pair[1]:
            raise CollisionError(f"candidate pair {self.pair} must be ordered (a < b)")

    def to_json(self) -> dict:
        return {
            "pair": list(self.pair),
            "created_frame": self.created_frame,
            "due_frame": self.due_frame,
            "predicted_center_a": list(self.predicted_center_a),
            "predicted_center_b": list(self.predicted_center_b),
            "status": self.status,
            "diagnostics": self.diagnostics,
        }


def speed_coefficient(frame_area: float, vehicle_area: float, alpha: float) -> float:
    if frame_area <= 0 or vehicle_area <= 0 or alpha <= 0:
        raise CollisionError(
            f"speed coefficient needs positive inputs (frame_area={frame_area}, "
            f"vehicle_area={vehicle_area}, alpha={alpha})"
        )
    return frame_area / (alpha * vehicle_area)


def _displacement(track, window: int) -> Tuple[float, float, int]:
    hist = track.history
    if len(hist) < 2:
        raise CollisionError(f"track {track.id}: speed needs at least 2 history entries, has {len(hist)}")
    k = min(len(hist) - 1, window)
    old, new = hist[-1 - k], hist[-1]
    return new.center[0] - old.center[0], new.center[1] - old.center[1], k


def average_speed(track, frame_area: float = CollisionParams.frame_area, window: int = 10) -> SpeedEstimate:
    """Normalized average speed over the last ``window`` frames.

    The denominator stays at ``window`` even when fewer displacements exist.
    """
    sum_dx, sum_dy, k = _displacement(track, window)
    coef = speed_coefficient(frame_area, area(track.history[-1].bbox), track.alpha)
    speed = coef * math.sqrt(sum_dx * sum_dx + sum_dy * sum_dy) / window
    return SpeedEstimate(track.id, coef, sum_dx, sum_dy, speed, k)


def predict_center(track, horizon: int = 10, window: int = 10) -> Point:
    """Linear extrapolation of the center along the recent motion direction."""
    sum_dx, sum_dy, _ = _displacement(track, window)
    cx, cy = track.history[-1].center
    f = horizon / window
    return (cx + sum_dx * f, cy + sum_dy * f)


def gate_speed(speed_a: float, speed_b: float, speed_limit: float) -> str:
    if speed_a < 0 or speed_b < 0:
        raise CollisionError("speeds must be non-negative")
    if speed_a < speed_limit and speed_b < speed_limit:
        return DISCARD
    return PROCEED


def proximity_threshold(bbox_a, bbox_b) -> float:
    return (half_diagonal(bbox_a) + half_diagonal(bbox_b)) / 2.0


def gate_proximity(pred_a: Point, pred_b: Point, bbox_a, bbox_b) -> str:
    if distance(pred_a, pred_b) > proximity_threshold(bbox_a, bbox_b):
        return DISCARD
    return PROCEED


def resolve_candidate(candidate: CollisionCandidate, actual_a: Point, actual_b: Point,
                      frame_index: Optional[int] = None) -> CollisionCandidate:
    """Compare actual and predicted centers at the due frame; returns the resolved candidate."""
    if candidate.status != PENDING:
        raise CollisionError(f"candidate {candidate.pair} already {candidate.status}")
    if frame_index is not None and frame_index < candidate.due_frame:
        raise CollisionError(
            f"candidate {candidate.pair} is due at frame {candidate.due_frame}, cannot resolve at {frame_index}"
        )
    dev_a = distance(actual_a, candidate.predicted_center_a)
    dev_b = distance(actual_b, candidate.predicted_center_b)
    pred_dist = distance(candidate.predicted_center_a, candidate.predicted_center_b)
    threshold = pred_dist / 2.0
    max_dev = max(dev_a, dev_b)
    status = CONFIRMED if max_dev > threshold else REJECTED
    diag = dict(candidate.diagnostics)
    diag.update(
        actual_center_a=list(actual_a),
        actual_center_b=list(actual_b),
        deviation_a=dev_a,
        deviation_b=dev_b,
        max_deviation=max_dev,
        deviation_threshold=threshold,
        deviation_ratio=(max_dev / threshold) if threshold > 0 else math.inf,
        retired=False,
    )
    return replace(candidate, status=status, diagnostics=diag)


def _reject_retired(candidate: CollisionCandidate, missing: List[int]) -> CollisionCandidate:
    diag = dict(candidate.diagnostics)
    diag.update(
        actual_center_a=None, actual_center_b=None, deviation_a=None, deviation_b=None,
        max_deviation=None, deviation_threshold=None, deviation_ratio=None,
        retired=True, retired_tracks=missing,
    )
    return replace(candidate, status=REJECTED, diagnostics=diag)


def _evaluate_pair(a, b, frame_index: int, params: CollisionParams, counts: Counter):
    counts["pairs_examined"] += 1
    sa = average_speed(a, params.frame_area, params.speed_window)
    sb = average_speed(b, params.frame_area, params.speed_window)
    if gate_speed(sa.speed, sb.speed, params.speed_limit) == DISCARD:
        counts["speed_discarded"] += 1
        return None
    pa = predict_center(a, params.horizon, params.speed_window)
    pb = predict_center(b, params.horizon, params.speed_window)
    if gate_proximity(pa, pb, a.bbox, b.bbox) == DISCARD:
        counts["proximity_discarded"] += 1
        return None
    counts["candidates_created"] += 1
    diag = {
        "speed_a": sa.speed, "speed_b": sb.speed,
        "coefficient_a": sa.coefficient, "coefficient_b": sb.coefficient,
        "sum_dx_a": sa.sum_dx, "sum_dy_a": sa.sum_dy,
        "sum_dx_b": sb.sum_dx, "sum_dy_b": sb.sum_dy,
        "speed_limit": params.speed_limit,
        "predicted_distance": distance(pa, pb),
        "half_diagonal_a": half_diagonal(a.bbox),
        "half_diagonal_b": half_diagonal(b.bbox),
        "proximity_threshold": proximity_threshold(a.bbox, b.bbox),
        "bbox_a": list(a.bbox), "bbox_b": list(b.bbox),
    }
    return CollisionCandidate((a.id, b.id), frame_index, frame_index + params.horizon, pa, pb, PENDING, diag)


def detect_collisions(tracks: Sequence, pending: Mapping[Tuple[int, int], CollisionCandidate],
                      frame_index: int, params: Optional[CollisionParams] = None,
                      counts: Optional[Counter] = None):
    """One frame of the cascade.

    Pending candidates due at (or before) ``frame_index`` are resolved first; a
    resolved pair may immediately receive a new prediction.  Pairs that still
    have a pending candidate are skipped.  ``pending`` is not modified.

    Returns ``(new_candidates, resolved_candidates)``, both ordered by pair.
    """
    params = params or CollisionParams()
    counts = counts if counts is not None else Counter()
    by_id = {t.id: t for t in tracks}
    for t in tracks:
        if t.history and t.history[-1].frame_index != frame_index:
            raise CollisionError(f"track {t.id} snapshot is at frame {t.history[-1].frame_index}, not {frame_index}")

    resolved: List[CollisionCandidate] = []
    still_pending = set()
    for pair in sorted(pending):
        cand = pending[pair]
        if cand.due_frame > frame_index:
            still_pending.add(pair)
            continue
        missing = [tid for tid in pair if tid not in by_id]
        if missing:
            done = _reject_retired(cand, missing)
        else:
            done = resolve_candidate(cand, by_id[pair[0]].center, by_id[pair[1]].center, frame_index)
        counts["confirmed" if done.status == CONFIRMED else "rejected"] += 1
        resolved.append(done)

    eligible = sorted((t for t in tracks if len(t.history) >= 2), key=lambda t: t.id)
    new: List[CollisionCandidate] = []
    for i, a in enumerate(eligible):
        for b in eligible[i + 1:]:
            if (a.id, b.id) in still_pending:
                continue
            cand = _evaluate_pair(a, b, frame_index, params, counts)
            if cand is not None:
                new.append(cand)
    return new, resolved


class CollisionEstimator:
    """Stateful wrapper keeping the pending-candidate set and funnel counters.

    Only tracks with at least ``params.min_history`` entries are handed to
    :func:`detect_collisions`.  A younger track divides fewer than ten
    displacements by ten, so its predicted center lags its true motion and the
    deviation test reads the lag as an impact.  ``min_history = 2`` feeds every
    track, as :func:`detect_collisions` alone would.
    """

    def __init__(self, params: Optional[CollisionParams] = None, trace=None):
        self.params = params or CollisionParams()
        self.pending: Dict[Tuple[int, int], CollisionCandidate] = {}
        self.counts: Counter = Counter({k: 0 for k in FUNNEL_KEYS})
        self.trace = trace

    def update(self, tracks: Sequence, frame_index: int):
        mature = [t for t in tracks if len(t.history) >= self.params.min_history]
        new, resolved = detect_collisions(mature, self.pending, frame_index, self.params, self.counts)
        for cand in resolved:
            del self.pending[cand.pair]
        for cand in new:
            self.pending[cand.pair] = cand
        if self.trace is not None:
            for cand in resolved:
                self.trace.write(json.dumps(cand.to_json()) + "\n")
        return new, resolved
