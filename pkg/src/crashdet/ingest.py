"""Frame and detection ingestion.

Frames come either from a directory of binary PGM files (``frame_%06d.pgm``)
or from a raw byte stream with a one-line ASCII header.  Detections come from
a JSON-lines feed whose first line declares the source resolution, so boxes
can be rescaled to the working resolution together with the pixels.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Dict, Iterable, Iterator, List, Sequence, Tuple

import cv2
import numpy as np

from . import WORKING_RESOLUTION
from .errors import DetectionFormatError, FrameSourceError
from .geometry import BBox, iou

log = logging.getLogger(__name__)

VEHICLE_CLASSES = ("car", "truck", "bus", "motorcycle")
FRAME_FILE_RE = re.compile(r"^frame_(\d{6})\.pgm$")
RAW_MAGIC = "CRASHRAW"
RAW_VERSION = "v1"


@dataclass(frozen=True)
class Frame:
    """Grayscale frame; ``pixels`` is a (height, width) uint8 array."""

    index: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"frame index must be non-negative, got {self.index}")
        if self.pixels.ndim != 2:
            raise ValueError("frame pixels must be a 2-D grayscale array")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return (self.width, self.height)


@dataclass(frozen=True)
class Detection:
    frame_index: int
    class_label: str
    bbox: BBox
    score: float

    def __post_init__(self):
        if self.class_label not in VEHICLE_CLASSES:
            raise ValueError(f"unknown class label {self.class_label!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise ValueError(f"bbox {self.bbox} has non-positive size")

    def to_json(self) -> dict:
        return {
            "frame": self.frame_index,
            "class": self.class_label,
            "bbox": [float(v) for v in self.bbox],
            "score": float(self.score),
        }


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameSourceError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FrameSourceError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FrameSourceError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FrameSourceError(f"{path}: only maxval 255 is supported, got {maxval}")
    raster = data[offset:offset + width * height]
    if len(raster) != width * height:
        raise FrameSourceError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------

class ImageDirectorySource:
    """Iterates ``frame_%06d.pgm`` files; indices must run 0, 1, 2, ... without gaps."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not self.path.is_dir():
            raise FrameSourceError(f"frame directory {self.path} does not exist")
        indexed = []
        for name in os.listdir(self.path):
            m = FRAME_FILE_RE.match(name)
            if m:
                indexed.append((int(m.group(1)), name))
        indexed.sort()
        for expected, (idx, _) in enumerate(indexed):
            if idx != expected:
                raise FrameSourceError(
                    f"{self.path}: non-contiguous frame indices, first gap at index {expected}"
                )
        self._files = [name for _, name in indexed]
        self.fps = None

    def __len__(self) -> int:
        return len(self._files)

    def __iter__(self) -> Iterator[Frame]:
        for idx, name in enumerate(self._files):
            yield Frame(idx, read_pgm(self.path / name))


class RawStreamSource:
    """``CRASHRAW v1 <width> <height> <fps>`` header followed by byte planes."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not self.path.exists():
            raise FrameSourceError(f"raw stream {self.path} does not exist")
        with open(self.path, "rb") as fh:
            header = fh.readline()
            self._offset = fh.tell()
        self.width, self.height, self.fps = parse_raw_header(header)

    def __iter__(self) -> Iterator[Frame]:
        plane = self.width * self.height
        with open(self.path, "rb") as fh:
            fh.seek(self._offset)
            idx = 0
            while True:
                buf = fh.read(plane)
                if not buf:
                    return
                if len(buf) != plane:
                    raise FrameSourceError(
                        f"{self.path}: truncated plane at frame {idx} ({len(buf)} of {plane} bytes)"
                    )
                yield Frame(idx, np.frombuffer(buf, dtype=np.uint8).reshape(self.height, self.width).copy())
                idx += 1


def parse_raw_header(line: bytes) -> Tuple[int, int, float]:
    try:
        parts = line.decode("ascii").split()
    except UnicodeDecodeError:
        raise FrameSourceError("malformed raw-stream header (not ASCII)") from None
    if len(parts) != 5 or parts[0] != RAW_MAGIC or parts[1] != RAW_VERSION:
        raise FrameSourceError(f"malformed raw-stream header {line[:64]!r}")
    try:
        width, height, fps = int(parts[2]), int(parts[3]), float(parts[4])
    except ValueError:
        raise FrameSourceError(f"malformed raw-stream header {line[:64]!r}") from None
    if width <= 0 or height <= 0 or fps <= 0:
        raise FrameSourceError(f"raw-stream header has non-positive dimensions or fps: {line[:64]!r}")
    return width, height, fps


def write_raw_stream(path: str | os.PathLike, frames: Iterable[np.ndarray], fps: float) -> None:
    frames = list(frames)
    h, w = frames[0].shape if frames else (0, 0)
    with open(path, "wb") as fh:
        fh.write(f"{RAW_MAGIC} {RAW_VERSION} {w} {h} {fps:g}\n".encode("ascii"))
        for px in frames:
            fh.write(np.ascontiguousarray(px, dtype=np.uint8).tobytes())


def open_frame_source(path: str | os.PathLike, kind: str = "image-directory"):
    if kind == "image-directory":
        return ImageDirectorySource(path)
    if kind == "raw-stream":
        return RawStreamSource(path)
    raise ValueError(f"unknown frame source kind {kind!r}")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_frame(frame: Frame, resolution: Tuple[int, int] = WORKING_RESOLUTION) -> Frame:
    """Bilinear resize to the working resolution; identity if already there."""
    if frame.width == 0 or frame.height == 0:
        raise ValueError("cannot normalize a zero-sized frame")
    if frame.size == tuple(resolution):
        return frame
    pixels = cv2.resize(frame.pixels, tuple(resolution), interpolation=cv2.INTER_LINEAR)
    return Frame(frame.index, pixels)


def scale_bbox(bbox: Sequence[float], source: Tuple[int, int],
               target: Tuple[int, int] = WORKING_RESOLUTION) -> BBox:
    sx = target[0] / source[0]
    sy = target[1] / source[1]
    x, y, w, h = bbox
    return (x * sx, y * sy, w * sx, h * sy)


# ---------------------------------------------------------------------------
# Detection feed
# ---------------------------------------------------------------------------

def _iter_lines(stream) -> Iterator[str]:
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "r", encoding="utf-8") as fh:
            yield from fh
    else:
        yield from stream


def read_detections(stream, resolution: Tuple[int, int] = WORKING_RESOLUTION) -> Dict[int, List[Detection]]:
    """Parse a detection feed into ``{frame_index: [Detection, ...]}`` sorted by frame.

    ``stream`` may be a path, an open text file or any iterable of lines.
    """
    source = None
    groups: Dict[int, List[Detection]] = {}
    for lineno, raw in enumerate(_iter_lines(stream), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DetectionFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise DetectionFormatError("expected a JSON object", lineno)
        if source is None:
            try:
                source = (int(rec["source_width"]), int(rec["source_height"]))
            except (KeyError, TypeError, ValueError):
                raise DetectionFormatError("first line must declare source_width and source_height", lineno) from None
            if source[0] <= 0 or source[1] <= 0:
                raise DetectionFormatError("source dimensions must be positive", lineno)
            continue
        det = _parse_detection(rec, lineno, source, resolution)
        groups.setdefault(det.frame_index, []).append(det)
    return {k: groups[k] for k in sorted(groups)}


def _parse_detection(rec: dict, lineno: int, source, resolution) -> Detection:
    missing = [k for k in ("frame", "class", "bbox", "score") if k not in rec]
    if missing:
        raise DetectionFormatError(f"missing keys {missing}", lineno)
    frame, label, bbox, score = rec["frame"], rec["class"], rec["bbox"], rec["score"]
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
        raise DetectionFormatError(f"frame must be a non-negative integer, got {frame!r}", lineno)
    if label not in VEHICLE_CLASSES:
        raise DetectionFormatError(f"unknown class label {label!r}", lineno)
    if (not isinstance(bbox, list) or len(bbox) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in bbox)):
        raise DetectionFormatError(f"bbox must be four finite numbers, got {bbox!r}", lineno)
    if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0.0 <= score <= 1.0:
        raise DetectionFormatError(f"score {score!r} outside range [0, 1]", lineno)
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise DetectionFormatError(f"bbox {bbox} has non-positive size", lineno)
    if x >= source[0] or y >= source[1] or x + w <= 0 or y + h <= 0:
        raise DetectionFormatError(f"bbox {bbox} lies outside the {source[0]}x{source[1]} source frame", lineno)
    return Detection(frame, label, scale_bbox((x, y, w, h), source, resolution), float(score))


def write_detections(groups: Dict[int, Sequence[Detection]], fh: IO[str],
                     source: Tuple[int, int] = WORKING_RESOLUTION) -> None:
    fh.write(json.dumps({"source_width": int(source[0]), "source_height": int(source[1])}) + "\n")
    for frame_index in sorted(groups):
        for det in groups[frame_index]:
            fh.write(json.dumps(det.to_json()) + "\n")


def detections_to_text(groups: Dict[int, Sequence[Detection]],
                       source: Tuple[int, int] = WORKING_RESOLUTION) -> str:
    buf = io.StringIO()
    write_detections(groups, buf, source)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Non-maximum suppression
# ---------------------------------------------------------------------------

def nms(detections: Sequence[Detection], iou_threshold: float = 0.45) -> List[Detection]:
    """Greedy class-aware suppression; result sorted by descending score."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not detections:
        return []
    frames = {d.frame_index for d in detections}
    if len(frames) > 1:
        raise ValueError(f"nms expects detections from a single frame, got frames {sorted(frames)}")
    # stable sort keeps input order among equal scores
    order = sorted(detections, key=lambda d: -d.score)
    kept: List[Detection] = []
    for det in order:
        if all(k.class_label != det.class_label or iou(k.bbox, det.bbox) <= iou_threshold for k in kept):
            kept.append(det)
    return kept
