"""MOSSE correlation-filter tracking with track-compensated frame interpolation.

Each live vehicle owns a :class:`MosseFilter` trained on a fixed 64x64
resampling of its box.  Slow vehicles are throttled: once a track has been
below ``min_speed`` for three frames it alternates between a filter call and
a cheap motion extrapolation (TCFI), which roughly halves filter work on
congested roads.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from . import WORKING_RESOLUTION
from .errors import TrackingError
from .geometry import BBox, Point, area, center, centered, distance, iou, translate
from .ingest import Detection, Frame

log = logging.getLogger(__name__)

TRACKED = "TRACKED"
INTERPOLATED = "INTERPOLATED"
LOST = "LOST"
FILTER = "FILTER"
EXTRAPOLATE = "EXTRAPOLATE"

DEFAULT_ALPHA = {"car": 4.0, "truck": 2.0, "bus": 2.0, "motorcycle": 8.0}


@dataclass
class TrackerParams:
    min_speed: float = 10.0
    tcfi: bool = True
    tcfi_stride: int = 2
    iou_floor: float = 0.3
    max_missed: int = 10
    snap_distance: float = 2.0
    psr_threshold: float = 5.7
    sigma: float = 2.0
    learning_rate: float = 0.125
    perturbations: int = 8
    max_rotation_deg: float = 5.0
    max_scale_change: float = 0.05
    epsilon: float = 1e-5
    window: int = 64
    min_patch: float = 8.0
    history: int = 30
    subpixel: bool = True
    alpha: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA))


# ---------------------------------------------------------------------------
# Correlation primitives
# ---------------------------------------------------------------------------

def correlate(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Circular cross-correlation ``r[dy, dx] = sum image[y+dy, x+dx] * kernel[y, x]`` via FFT."""
    return np.real(np.fft.ifft2(np.fft.fft2(image) * np.conj(np.fft.fft2(kernel))))


def gaussian_target(window: Tuple[int, int], sigma: float) -> np.ndarray:
    w, h = window
    ys, xs = np.mgrid[0:h, 0:w]
    return np.exp(-((xs - w // 2) ** 2 + (ys - h // 2) ** 2) / (2.0 * sigma ** 2))


_HANN_CACHE: Dict[Tuple[int, int], np.ndarray] = {}


def _hann(window: Tuple[int, int]) -> np.ndarray:
    win = _HANN_CACHE.get(window)
    if win is None:
        win = np.outer(np.hanning(window[1]), np.hanning(window[0]))
        _HANN_CACHE[window] = win
    return win


def preprocess(patch: np.ndarray) -> np.ndarray:
    """Log transform, zero mean / unit norm, cosine window."""
    p = np.log1p(patch.astype(np.float64))
    p -= p.mean()
    norm = np.linalg.norm(p)
    if norm > 0:
        p /= norm
    return p * _hann((p.shape[1], p.shape[0]))


def extract_patch(pixels: np.ndarray, bbox: Sequence[float], window: Tuple[int, int],
                  rotation_deg: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Bilinear resample of ``bbox`` into a ``window`` patch, optionally rotated/scaled about its center."""
    x, y, w, h = bbox
    ww, wh = window
    sx, sy = w / ww, h / wh
    # window pixel (u, v) -> frame point, with an optional similarity about the box center
    cx, cy = x + w / 2.0, y + h / 2.0
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta) * scale, math.sin(theta) * scale
    # frame = C + R*S*((u + .5 - ww/2) * sx, (v + .5 - wh/2) * sy)
    m = np.array([
        [c * sx, -s * sy, 0.0],
        [s * sx, c * sy, 0.0],
    ])
    u0, v0 = 0.5 - ww / 2.0, 0.5 - wh / 2.0
    m[0, 2] = cx + c * sx * u0 - s * sy * v0 - 0.5
    m[1, 2] = cy + s * sx * u0 + c * sy * v0 - 0.5
    return cv2.warpAffine(pixels, m, (ww, wh), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_REPLICATE)


def peak_to_sidelobe(response: np.ndarray, exclude: int = 11) -> Tuple[float, Tuple[int, int]]:
    r, c = np.unravel_index(int(np.argmax(response)), response.shape)
    peak = float(response[r, c])
    half = exclude // 2
    mask = np.ones(response.shape, dtype=bool)
    mask[max(0, r - half):r + half + 1, max(0, c - half):c + half + 1] = False
    side = response[mask]
    std = float(side.std())
    if std == 0.0:
        return (math.inf if peak > side.mean() else 0.0), (r, c)
    return (peak - float(side.mean())) / std, (r, c)


def _parabolic_offset(left: float, mid: float, right: float) -> float:
    denom = left - 2.0 * mid + right
    if denom >= 0.0:
        return 0.0
    off = 0.5 * (left - right) / denom
    return max(-0.5, min(0.5, off))


@dataclass
class MosseFilter:
    window: Tuple[int, int]
    numerator: np.ndarray
    denominator: np.ndarray
    learning_rate: float
    target: np.ndarray
    epsilon: float = 1e-5
    subpixel: bool = True
    _kernel: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def kernel(self) -> np.ndarray:
        """Conjugate frequency-domain filter ``A / (B + eps)``."""
        if self._kernel is None:
            self._kernel = self.numerator / (self.denominator + self.epsilon)
        return self._kernel

    def response(self, patch: np.ndarray) -> np.ndarray:
        F = np.fft.fft2(preprocess(patch))
        return np.real(np.fft.ifft2(F * self.kernel))

    def locate(self, pixels: np.ndarray, region: Sequence[float]) -> Tuple[float, float, float]:
        """Displacement (dx, dy) in frame pixels of the target inside ``region``, plus PSR."""
        resp = self.response(extract_patch(pixels, region, self.window))
        psr, (r, c) = peak_to_sidelobe(resp)
        ww, wh = self.window
        fx, fy = float(c), float(r)
        if self.subpixel:
            fx += _parabolic_offset(resp[r, (c - 1) % ww], resp[r, c], resp[r, (c + 1) % ww])
            fy += _parabolic_offset(resp[(r - 1) % wh, c], resp[r, c], resp[(r + 1) % wh, c])
        dxw = fx - ww // 2
        dyw = fy - wh // 2
        if dxw > ww / 2:
            dxw -= ww
        if dyw > wh / 2:
            dyw -= wh
        return dxw * region[2] / ww, dyw * region[3] / wh, psr

    def update(self, pixels: np.ndarray, region: Sequence[float]) -> None:
        F = np.fft.fft2(preprocess(extract_patch(pixels, region, self.window)))
        eta = self.learning_rate
        self.numerator = eta * (self.target * np.conj(F)) + (1.0 - eta) * self.numerator
        self.denominator = eta * (F * np.conj(F)) + (1.0 - eta) * self.denominator
        self._kernel = None


def _as_float(frame) -> np.ndarray:
    pixels = frame.pixels if isinstance(frame, Frame) else frame
    return pixels.astype(np.float32, copy=False)


def mosse_init(frame, bbox: Sequence[float], rng: Optional[np.random.Generator] = None,
               params: Optional[TrackerParams] = None) -> MosseFilter:
    """Train a filter on ``bbox`` and 8 randomly rotated/scaled copies of it."""
    params = params or TrackerParams()
    pixels = _as_float(frame)
    x, y, w, h = bbox
    if w < 8 or h < 8:
        raise TrackingError(f"degenerate bbox {tuple(bbox)}: filter needs at least 8x8 pixels")
    fh, fw = pixels.shape
    if x + w <= 0 or y + h <= 0 or x >= fw or y >= fh:
        raise TrackingError(f"bbox {tuple(bbox)} lies outside the {fw}x{fh} frame")
    rng = rng if rng is not None else np.random.default_rng(0)
    window = (params.window, params.window)
    G = np.fft.fft2(gaussian_target(window, params.sigma))
    A = np.zeros(G.shape, dtype=complex)
    B = np.zeros(G.shape, dtype=complex)
    for i in range(params.perturbations + 1):
        if i == 0:
            rot, scl = 0.0, 1.0
        else:
            rot = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
            scl = 1.0 + rng.uniform(-params.max_scale_change, params.max_scale_change)
        F = np.fft.fft2(preprocess(extract_patch(pixels, bbox, window, rot, scl)))
        A += G * np.conj(F)
        B += F * np.conj(F)
    return MosseFilter(window, A, B, params.learning_rate, G, params.epsilon, params.subpixel)


def mosse_track(filt: MosseFilter, frame, prior_bbox: Sequence[float]) -> Tuple[BBox, float]:
    """Locate the target near ``prior_bbox`` and update the filter there."""
    pixels = _as_float(frame)
    dx, dy, psr = filt.locate(pixels, prior_bbox)
    bbox = translate(prior_bbox, dx, dy)
    filt.update(pixels, bbox)
    return bbox, psr


# ---------------------------------------------------------------------------
# Tracks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryEntry:
    frame_index: int
    bbox: BBox
    center: Point

    @classmethod
    def of(cls, frame_index: int, bbox: Sequence[float]) -> "HistoryEntry":
        bbox = tuple(float(v) for v in bbox)
        return cls(frame_index, bbox, center(bbox))


@dataclass(frozen=True)
class TrackSnapshot:
    """Immutable view of a track handed to downstream stages."""

    id: int
    class_label: str
    alpha: float
    history: Tuple[HistoryEntry, ...]
    mode: str = TRACKED

    @property
    def bbox(self) -> BBox:
        return self.history[-1].bbox

    @property
    def center(self) -> Point:
        return self.history[-1].center

    @property
    def frame_index(self) -> int:
        return self.history[-1].frame_index


@dataclass
class Track:
    id: int
    class_label: str
    alpha: float
    history: Deque[HistoryEntry]
    filter: Optional[MosseFilter] = None
    mode: str = TRACKED
    last_psr: float = math.inf
    missed: int = 0
    extrapolated_streak: int = 0
    mosse_calls: int = 0

    @property
    def bbox(self) -> BBox:
        return self.history[-1].bbox

    def append(self, frame_index: int, bbox: Sequence[float]) -> None:
        if self.history and frame_index <= self.history[-1].frame_index:
            raise TrackingError(f"track {self.id}: history frame index {frame_index} does not increase")
        self.history.append(HistoryEntry.of(frame_index, bbox))

    def snapshot(self) -> TrackSnapshot:
        return TrackSnapshot(self.id, self.class_label, self.alpha, tuple(self.history), self.mode)


def associate(tracks: Sequence[Track], detections: Sequence[Detection], iou_floor: float = 0.3):
    """Greedy IoU matching, best pair first; ties go to the lower track id.

    Returns ``(matches, unmatched_detection_indices, unmatched_track_ids)`` where
    ``matches`` is a list of ``(track_id, detection_index)``.
    """
    frames = {d.frame_index for d in detections}
    if len(frames) > 1:
        raise TrackingError(f"detections span several frames: {sorted(frames)}")
    pairs = []
    for t in tracks:
        for j, det in enumerate(detections):
            ov = iou(t.bbox, det.bbox)
            if ov >= iou_floor:
                pairs.append((-ov, t.id, j))
    pairs.sort()
    used_t, used_d, matches = set(), set(), []
    for _, tid, j in pairs:
        if tid in used_t or j in used_d:
            continue
        used_t.add(tid)
        used_d.add(j)
        matches.append((tid, j))
    unmatched_d = [j for j in range(len(detections)) if j not in used_d]
    unmatched_t = [t.id for t in tracks if t.id not in used_t]
    return matches, unmatched_d, unmatched_t


def frame_speeds(track, frame_area: float, count: int = 3) -> List[float]:
    """Normalized per-frame speeds (speed coefficient x pixel displacement) of the last ``count`` frames."""
    hist = list(track.history)[-(count + 1):]
    speeds = []
    for prev, cur in zip(hist, hist[1:]):
        coef = frame_area / (track.alpha * area(cur.bbox))
        speeds.append(coef * distance(prev.center, cur.center))
    return speeds


def tcfi_decide(track, min_speed: float, stride: int = 2,
                frame_area: float = WORKING_RESOLUTION[0] * WORKING_RESOLUTION[1]) -> str:
    """FILTER or EXTRAPOLATE for this frame.

    A track extrapolates only when its speed stayed below ``min_speed`` over the
    last three frames and it has not already coasted ``stride - 1`` frames in a row.
    """
    if len(track.history) < 3:
        return FILTER
    if any(s >= min_speed for s in frame_speeds(track, frame_area)):
        return FILTER
    streak = getattr(track, "extrapolated_streak", 0)
    return EXTRAPOLATE if streak < stride - 1 else FILTER


def extrapolate(track) -> BBox:
    hist = list(track.history)
    if len(hist) < 2:
        raise TrackingError(f"track {track.id}: extrapolation needs at least 2 history entries")
    recent = hist[-3:]
    n = len(recent) - 1
    dx = (recent[-1].center[0] - recent[0].center[0]) / n
    dy = (recent[-1].center[1] - recent[0].center[1]) / n
    return translate(hist[-1].bbox, dx, dy)


class Tracker:
    """Owns all live tracks of one camera stream and advances them frame by frame."""

    def __init__(self, params: Optional[TrackerParams] = None, seed: int = 0,
                 frame_size: Tuple[int, int] = WORKING_RESOLUTION):
        self.params = params or TrackerParams()
        self.rng = np.random.default_rng(seed)
        self.frame_size = frame_size
        self.frame_area = float(frame_size[0] * frame_size[1])
        self.tracks: Dict[int, Track] = {}
        self.next_id = 0
        self.last_frame: Optional[int] = None
        self.mosse_calls = 0
        self.retired = 0

    def _region(self, bbox: Sequence[float]) -> BBox:
        m = self.params.min_patch
        if bbox[2] >= m and bbox[3] >= m:
            return tuple(bbox)
        return centered(center(bbox), max(bbox[2], m), max(bbox[3], m))

    def _spawn(self, pixels: np.ndarray, det: Detection, frame_index: int) -> Track:
        track = Track(
            id=self.next_id,
            class_label=det.class_label,
            alpha=float(self.params.alpha.get(det.class_label, DEFAULT_ALPHA["car"])),
            history=deque(maxlen=self.params.history),
        )
        track.filter = mosse_init(pixels, self._region(det.bbox), self.rng, self.params)
        track.append(frame_index, det.bbox)
        self.tracks[track.id] = track
        self.next_id += 1
        return track

    def _inside(self, bbox: Sequence[float]) -> bool:
        cx, cy = center(bbox)
        return 0.0 <= cx < self.frame_size[0] and 0.0 <= cy < self.frame_size[1]

    def step(self, frame: Frame, detections: Optional[Sequence[Detection]] = None) -> List[TrackSnapshot]:
        """Advance every track to ``frame``; ``detections`` (if given) refresh and spawn tracks."""
        if self.last_frame is not None and frame.index != self.last_frame + 1:
            raise TrackingError(f"frame index {frame.index} does not follow {self.last_frame}")
        self.last_frame = frame.index
        p = self.params
        pixels = _as_float(frame)

        matched: Dict[int, Detection] = {}
        unmatched_dets: List[int] = []
        live = [self.tracks[k] for k in sorted(self.tracks)]
        if detections is not None:
            matches, unmatched_dets, _ = associate(live, detections, p.iou_floor)
            matched = {tid: detections[j] for tid, j in matches}

        for track in live:
            decision = tcfi_decide(track, p.min_speed, p.tcfi_stride, self.frame_area) if p.tcfi else FILTER
            confident = False
            if decision == FILTER:
                dx, dy, psr = track.filter.locate(pixels, self._region(track.bbox))
                track.mosse_calls += 1
                self.mosse_calls += 1
                track.last_psr = psr
                track.extrapolated_streak = 0
                confident = psr >= p.psr_threshold
                if confident:
                    new_bbox = translate(track.bbox, dx, dy)
                    track.mode = TRACKED
                else:
                    new_bbox = extrapolate(track) if len(track.history) >= 2 else track.bbox
                    track.mode = INTERPOLATED
            else:
                new_bbox = extrapolate(track)
                track.extrapolated_streak += 1
                track.mode = INTERPOLATED

            det = matched.get(track.id)
            if det is not None:
                track.missed = 0
                if distance(center(new_bbox), center(det.bbox)) > p.snap_distance:
                    new_bbox = det.bbox
                track.mode = TRACKED if decision == FILTER else INTERPOLATED
            elif detections is not None:
                track.missed += 1

            if (track.missed >= p.max_missed
                    or (decision == FILTER and not confident and detections is None)
                    or not self._inside(new_bbox)):
                track.mode = LOST
                continue
            track.append(frame.index, new_bbox)
            if decision == FILTER and (confident or det is not None):
                track.filter.update(pixels, self._region(new_bbox))

        for tid in [t.id for t in live if t.mode == LOST]:
            del self.tracks[tid]
            self.retired += 1

        if detections is not None:
            for j in unmatched_dets:
                det = detections[j]
                if det.bbox[2] <= 0 or det.bbox[3] <= 0 or not self._inside(det.bbox):
                    continue
                self._spawn(pixels, det, frame.index)

        return [self.tracks[k].snapshot() for k in sorted(self.tracks)]


def track_dump_line(frame_index: int, snapshots: Sequence[TrackSnapshot], psr: Dict[int, float] | None = None) -> str:
    psr = psr or {}
    return json.dumps({
        "frame": frame_index,
        "tracks": [
            {"id": s.id, "bbox": list(s.bbox), "mode": s.mode,
             "psr": (None if not math.isfinite(psr.get(s.id, math.inf)) else psr.get(s.id))}
            for s in snapshots
        ],
    })
