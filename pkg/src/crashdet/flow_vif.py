"""Horn-Schunck optical flow and the violent-flow (ViF) descriptor.

The descriptor summarizes how abruptly flow magnitudes change over a
vehicle's crop sequence: each change map is binarized against its own mean,
the binary maps are averaged, and the average is histogrammed per block.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import FlowError

_AVG4 = np.array([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])


@dataclass
class FlowParams:
    smoothness: float = 0.1
    iterations: int = 100
    tolerance: float = 1e-4
    grid: Tuple[int, int] = (4, 4)
    bins: int = 20
    crop_size: int = 64
    crop_inflation: float = 0.25
    sequence_length: int = 30


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    iterations: int = 0

    @property
    def width(self) -> int:
        return int(self.u.shape[1])

    @property
    def height(self) -> int:
        return int(self.u.shape[0])

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u ** 2 + self.v ** 2)


@dataclass
class VifFeature:
    values: np.ndarray
    grid: Tuple[int, int]
    bins: int

    def __len__(self) -> int:
        return len(self.values)


def neighbor_average(f: np.ndarray) -> np.ndarray:
    """Mean of the 4-connected neighbors; out-of-range neighbors replicate the edge pixel."""
    return cv2.filter2D(f, cv2.CV_64F, _AVG4, borderType=cv2.BORDER_REPLICATE)


def image_derivatives(prev: np.ndarray, nxt: np.ndarray):
    """Central-difference spatial derivatives averaged over both frames, and the temporal difference."""
    gy0, gx0 = np.gradient(prev)
    gy1, gx1 = np.gradient(nxt)
    return 0.5 * (gx0 + gx1), 0.5 * (gy0 + gy1), nxt - prev


def horn_schunck(prev: np.ndarray, nxt: np.ndarray, smoothness: float = 0.1,
                 iterations: int = 100, tolerance: float = 1e-4) -> FlowField:
    """Jacobi iterations of the Horn-Schunck equations on [0, 1] intensity images.

    Stops early once the largest per-pixel update falls below ``tolerance``.
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise FlowError(f"crop shapes differ: {prev.shape} vs {nxt.shape}")
    if prev.ndim != 2:
        raise FlowError("horn_schunck expects 2-D grayscale crops")
    ix, iy, it = image_derivatives(prev, nxt)
    denom = smoothness ** 2 + ix ** 2 + iy ** 2
    u = np.zeros_like(prev)
    v = np.zeros_like(prev)
    done = 0
    for done in range(1, iterations + 1):
        u_avg = neighbor_average(u)
        v_avg = neighbor_average(v)
        common = (ix * u_avg + iy * v_avg + it) / denom
        u_new = u_avg - ix * common
        v_new = v_avg - iy * common
        step = max(float(np.abs(u_new - u).max()), float(np.abs(v_new - v).max()))
        u, v = u_new, v_new
        if step < tolerance:
            break
    return FlowField(u, v, done if iterations > 0 else 0)


def horn_schunck_energy(prev: np.ndarray, nxt: np.ndarray, flow: FlowField, smoothness: float) -> float:
    """Discrete objective minimized by :func:`horn_schunck`.

    Data term plus ``smoothness**2 / 4`` times squared differences over all
    4-neighbor edges inside the image.
    """
    ix, iy, it = image_derivatives(np.asarray(prev, float), np.asarray(nxt, float))
    data = float(np.sum((ix * flow.u + iy * flow.v + it) ** 2))
    smooth = 0.0
    for f in (flow.u, flow.v):
        smooth += float(np.sum(np.diff(f, axis=0) ** 2) + np.sum(np.diff(f, axis=1) ** 2))
    return data + smoothness ** 2 / 4.0 * smooth


# ---------------------------------------------------------------------------
# Crops
# ---------------------------------------------------------------------------

def crop_region(bbox: Sequence[float], frame_size: Tuple[int, int], inflation: float = 0.25):
    x, y, w, h = bbox
    x0 = max(0.0, x - inflation * w)
    y0 = max(0.0, y - inflation * h)
    x1 = min(float(frame_size[0]), x + w + inflation * w)
    y1 = min(float(frame_size[1]), y + h + inflation * h)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise FlowError(f"bbox {tuple(bbox)} has no overlap with the frame")
    return (x0, y0, x1 - x0, y1 - y0)


def resample(pixels: np.ndarray, region: Sequence[float], size: int) -> np.ndarray:
    x, y, w, h = region
    sx, sy = w / size, h / size
    m = np.array([[sx, 0.0, x + 0.5 * sx - 0.5], [0.0, sy, y + 0.5 * sy - 0.5]])
    src = pixels.astype(np.float32, copy=False)
    out = cv2.warpAffine(src, m, (size, size), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                         borderMode=cv2.BORDER_REPLICATE)
    return out.astype(np.float64) / 255.0


def crop_sequence(track, frames: Mapping[int, object], size: int = 64, inflation: float = 0.25,
                  length: int = 30) -> List[np.ndarray]:
    """Fixed-size [0, 1] crops around the last ``length`` history boxes of ``track``.

    ``frames`` maps frame index to a :class:`~crashdet.ingest.Frame` (or a raw array).
    """
    hist = list(track.history)
    if len(hist) < length:
        raise FlowError(f"track {track.id} has {len(hist)} history entries, need {length}; defer")
    crops = []
    for entry in hist[-length:]:
        frame = frames.get(entry.frame_index)
        if frame is None:
            raise FlowError(f"frame {entry.frame_index} is no longer buffered")
        pixels = getattr(frame, "pixels", frame)
        region = crop_region(entry.bbox, (pixels.shape[1], pixels.shape[0]), inflation)
        crops.append(resample(pixels, region, size))
    return crops


# ---------------------------------------------------------------------------
# Descriptor
# ---------------------------------------------------------------------------

def _block_counts(index_map: np.ndarray, grid: Tuple[int, int], bins: int) -> np.ndarray:
    rows, cols = grid
    h, w = index_map.shape
    if h % rows or w % cols:
        raise FlowError(f"map of shape {index_map.shape} does not split into a {rows}x{cols} grid")
    bh, bw = h // rows, w // cols
    out = []
    for r in range(rows):
        for c in range(cols):
            block = index_map[r * bh:(r + 1) * bh, c * bw:(c + 1) * bw]
            out.append(np.bincount(block.ravel(), minlength=bins) / block.size)
    return np.concatenate(out)


def block_histograms(mean_map: np.ndarray, grid: Tuple[int, int] = (4, 4), bins: int = 20) -> np.ndarray:
    """Per-block histograms of a [0, 1] map; bin ``k`` is ``[k/bins, (k+1)/bins)`` and 1 joins the last bin."""
    idx = np.clip(np.floor(np.asarray(mean_map, dtype=np.float64) * bins).astype(int), 0, bins - 1)
    return _block_counts(idx, grid, bins)


def vif_from_magnitudes(magnitudes: Sequence[np.ndarray], grid: Tuple[int, int] = (4, 4),
                        bins: int = 20) -> VifFeature:
    """Descriptor from a sequence of flow-magnitude maps (at least two).

    The mean binary map takes values ``hits / n``, so bins are assigned with
    integer arithmetic and exact bin edges stay exact.
    """
    if len(magnitudes) < 2:
        raise FlowError("need at least two magnitude maps")
    hits = np.zeros(np.shape(magnitudes[0]), dtype=np.int64)
    for prev, cur in zip(magnitudes, magnitudes[1:]):
        change = np.abs(np.asarray(cur, dtype=np.float64) - np.asarray(prev, dtype=np.float64))
        # >= keeps all-zero change maps fully set
        hits += change >= change.mean()
    n = len(magnitudes) - 1
    idx = np.minimum(hits * bins // n, bins - 1)
    return VifFeature(_block_counts(idx, grid, bins), tuple(grid), bins)


def sequence_flows(crops: Sequence[np.ndarray], params: Optional[FlowParams] = None) -> List[FlowField]:
    params = params or FlowParams()
    return [horn_schunck(a, b, params.smoothness, params.iterations, params.tolerance)
            for a, b in zip(crops, crops[1:])]


def vif_descriptor(crops: Sequence[np.ndarray], params: Optional[FlowParams] = None,
                   flows: Optional[Sequence[FlowField]] = None) -> VifFeature:
    params = params or FlowParams()
    if len(crops) < 3:
        raise FlowError(f"ViF needs at least 3 crops, got {len(crops)}")
    shape = crops[0].shape
    if any(c.shape != shape for c in crops):
        raise FlowError("crops must share one shape")
    if flows is None:
        flows = sequence_flows(crops, params)
    return vif_from_magnitudes([f.magnitude() for f in flows], params.grid, params.bins)


class DescriptorCache:
    """Memoizes flows between consecutive crops of a track so sliding windows reuse them."""

    def __init__(self, params: Optional[FlowParams] = None):
        self.params = params or FlowParams()
        self._flows: Dict[Tuple[int, int], FlowField] = {}

    def descriptor(self, track, frames: Mapping[int, object]) -> VifFeature:
        p = self.params
        crops = crop_sequence(track, frames, p.crop_size, p.crop_inflation, p.sequence_length)
        entries = list(track.history)[-p.sequence_length:]
        flows = []
        for i in range(1, len(crops)):
            key = (track.id, entries[i].frame_index)
            flow = self._flows.get(key)
            if flow is None:
                flow = horn_schunck(crops[i - 1], crops[i], p.smoothness, p.iterations, p.tolerance)
                self._flows[key] = flow
            flows.append(flow)
        return vif_descriptor(crops, p, flows)

    def forget(self, before_frame: int) -> None:
        for key in [k for k in self._flows if k[1] < before_frame]:
            del self._flows[key]


def write_feature_dump(records: Iterable[dict], fh: IO[str]) -> None:
    for rec in records:
        fh.write(json.dumps({
            "label": int(rec["label"]),
            "feature": [float(x) for x in rec["feature"]],
            "source": str(rec["source"]),
        }) + "\n")


def read_feature_dump(fh: Iterable[str]) -> List[dict]:
    out = []
    for lineno, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            feature = [float(x) for x in rec["feature"]]
            label = int(rec["label"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FlowError(f"feature dump line {lineno}: {exc}") from None
        if label not in (0, 1):
            raise FlowError(f"feature dump line {lineno}: label must be 0 or 1")
        if not all(math.isfinite(x) for x in feature):
            raise FlowError(f"feature dump line {lineno}: non-finite feature value")
        out.append({"label": label, "feature": feature, "source": rec.get("source", "")})
    return out
