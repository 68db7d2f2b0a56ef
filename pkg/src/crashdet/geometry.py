"""Axis-aligned box helpers. Boxes are ``(x, y, w, h)`` with (x, y) the top-left corner."""
from __future__ import annotations

import math
from typing import Sequence, Tuple

BBox = Tuple[float, float, float, float]
Point = Tuple[float, float]


def center(bbox: Sequence[float]) -> Point:
    x, y, w, h = bbox
    return (x + w / 2.0, y + h / 2.0)


def area(bbox: Sequence[float]) -> float:
    return float(bbox[2]) * float(bbox[3])


def half_diagonal(bbox: Sequence[float]) -> float:
    """Distance from the box center to any of its corners."""
    return math.hypot(bbox[2] / 2.0, bbox[3] / 2.0)


def distance(p: Sequence[float], q: Sequence[float]) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def intersection(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    iy = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    return ix * iy


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    inter = intersection(a, b)
    if inter <= 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def overlaps(a: Sequence[float], b: Sequence[float]) -> bool:
    return intersection(a, b) > 0.0


def translate(bbox: Sequence[float], dx: float, dy: float) -> BBox:
    return (bbox[0] + dx, bbox[1] + dy, bbox[2], bbox[3])


def centered(c: Sequence[float], w: float, h: float) -> BBox:
    return (c[0] - w / 2.0, c[1] - h / 2.0, w, h)
