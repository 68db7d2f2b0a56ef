"""Deterministic synthetic traffic scenes with ground truth.

Vehicles move on a flat ground plane (a four-lane horizontal road crossed by
a two-lane vertical road).  A simple oblique camera maps the plane to the
480x360 frame: vertical ground distances shrink by ``sin(elevation)`` and
vehicles gain a visible side face of height ``H * cos(elevation)``, so low
cameras produce projected overlaps between vehicles in adjacent lanes.

Crashes are planned: the two vehicles are timed to touch at ``impact_frame``,
after which both lose at least half their speed and turn by at least 45
degrees, slide for a few frames and stop.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from . import WORKING_RESOLUTION
from .geometry import BBox
from .ingest import Detection, Frame, write_detections, write_pgm

# length, width, height in ground-plane pixels
VEHICLE_DIMS = {
    "car": (48.0, 20.0, 16.0),
    "truck": (80.0, 26.0, 30.0),
    "bus": (96.0, 26.0, 32.0),
    "motorcycle": (24.0, 8.0, 14.0),
}
LANES_Y = (-60.0, -20.0, 20.0, 60.0)  # y < 0 drives towards -x, y > 0 towards +x
CROSS_LANES_X = (-20.0, 20.0)  # x < 0 drives towards +y, x > 0 towards -y
LANE_WIDTH = 40.0
ROAD_GRAY = 92


@dataclass
class VehicleBehavior:
    id: int
    class_label: str
    path: List[Tuple[float, float]]
    speed_profile: List[Tuple[int, float]]
    entry_frame: int = 0


@dataclass
class CrashPlan:
    pair: Tuple[int, int]
    impact_frame: int
    deflection_deg: Tuple[float, float] = (60.0, 60.0)
    speed_factor: Tuple[float, float] = (0.3, 0.3)
    slide_frames: int = 10


@dataclass
class CameraSpec:
    elevation_deg: float = 45.0
    scale: float = 1.0


@dataclass
class ScenarioSpec:
    seed: int
    duration: int
    behaviors: List[VehicleBehavior]
    camera: CameraSpec = field(default_factory=CameraSpec)
    crash_plan: Optional[CrashPlan] = None
    fps: float = 30.0
    noise: float = 3.0
    jitter: float = 0.75
    kind: str = "custom"

    @property
    def n_vehicles(self) -> int:
        return len(self.behaviors)

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.camera.elevation_deg <= 90.0:
            raise ValueError(f"elevation {self.camera.elevation_deg} outside [0, 90]")
        if self.camera.scale <= 0:
            raise ValueError("camera scale must be positive")
        ids = [b.id for b in self.behaviors]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        if self.crash_plan is not None:
            cp = self.crash_plan
            if not 0 <= cp.impact_frame < self.duration:
                raise ValueError(f"impact frame {cp.impact_frame} outside duration {self.duration}")
            if not set(cp.pair) <= set(ids) or cp.pair[0] == cp.pair[1]:
                raise ValueError(f"crash pair {cp.pair} does not name two vehicles")
            if min(abs(d) for d in cp.deflection_deg) < 45.0 or max(cp.speed_factor) > 0.5:
                raise ValueError("crash must deflect by >= 45 degrees and drop speed by >= 50%")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        data["behaviors"] = [
            VehicleBehavior(b["id"], b["class_label"], [tuple(p) for p in b["path"]],
                            [(int(f), float(s)) for f, s in b["speed_profile"]], b.get("entry_frame", 0))
            for b in data["behaviors"]
        ]
        data["camera"] = CameraSpec(**data.get("camera", {}))
        cp = data.get("crash_plan")
        if cp is not None:
            data["crash_plan"] = CrashPlan(tuple(cp["pair"]), cp["impact_frame"], tuple(cp["deflection_deg"]),
                                           tuple(cp["speed_factor"]), cp.get("slide_frames", 10))
        return cls(**data)


@dataclass
class GroundTruth:
    detections: Dict[int, List[Detection]]
    boxes: Dict[int, Dict[int, BBox]]
    positions: Dict[int, Dict[int, Tuple[float, float]]]
    crash_label: bool
    crash_frame: Optional[int]
    involved_ids: Tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "crash_label": self.crash_label,
            "crash_frame": self.crash_frame,
            "involved_ids": list(self.involved_ids),
            "boxes": {str(f): {str(k): list(v) for k, v in b.items()} for f, b in self.boxes.items()},
        }


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def _speed_at(profile: Sequence[Tuple[int, float]], t: int) -> float:
    frames = [f for f, _ in profile]
    speeds = [s for _, s in profile]
    return float(np.interp(t, frames, speeds))


def _along(path: np.ndarray, cum: np.ndarray, s: float):
    if s >= cum[-1]:
        return None, None
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = max(0, min(i, len(path) - 2))
    seg = path[i + 1] - path[i]
    seg_len = cum[i + 1] - cum[i]
    direction = seg / seg_len
    return path[i] + direction * (s - cum[i]), direction


def _orientation(behavior: VehicleBehavior) -> str:
    p = np.asarray(behavior.path, float)
    d = p[1] - p[0]
    return "h" if abs(d[0]) >= abs(d[1]) else "v"


def footprint_extent(behavior: VehicleBehavior) -> Tuple[float, float]:
    """Half extents of the ground footprint along x and y."""
    length, width, _ = VEHICLE_DIMS[behavior.class_label]
    if _orientation(behavior) == "h":
        return length / 2.0, width / 2.0
    return width / 2.0, length / 2.0


def simulate(spec: ScenarioSpec) -> Dict[int, np.ndarray]:
    """Ground-plane centers per vehicle, shape (duration, 2); NaN where absent."""
    out: Dict[int, np.ndarray] = {}
    cp = spec.crash_plan
    for b in spec.behaviors:
        path = np.asarray(b.path, dtype=float)
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        pos = np.full((spec.duration, 2), np.nan)
        s = 0.0
        crash_idx = None
        if cp is not None and b.id in cp.pair:
            crash_idx = cp.pair.index(b.id)
        post_v = None
        slide_left = 0
        for t in range(spec.duration):
            if t < b.entry_frame:
                continue
            if crash_idx is not None and t > cp.impact_frame and post_v is not None:
                prev = pos[t - 1]
                if slide_left > 0:
                    pos[t] = prev + post_v
                    slide_left -= 1
                else:
                    pos[t] = prev
                continue
            p, direction = _along(path, cum, s)
            if p is None:
                break
            pos[t] = p
            v = _speed_at(b.speed_profile, t)
            if crash_idx is not None and t == cp.impact_frame:
                theta = math.radians(cp.deflection_deg[crash_idx])
                rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
                post_v = rot @ (direction * v) * cp.speed_factor[crash_idx]
                slide_left = cp.slide_frames
            s += v
        out[b.id] = pos
    return out


def world_contact(spec: ScenarioSpec, positions: Dict[int, np.ndarray], exclude=()) -> List[Tuple[int, int, int]]:
    """(frame, id_a, id_b) for every frame where two ground footprints intersect."""
    ext = {b.id: footprint_extent(b) for b in spec.behaviors}
    ids = sorted(positions)
    hits = []
    excluded = {tuple(sorted(p)) for p in exclude}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if (a, b) in excluded:
                continue
            pa, pb = positions[a], positions[b]
            dx = np.abs(pa[:, 0] - pb[:, 0])
            dy = np.abs(pa[:, 1] - pb[:, 1])
            touching = (dx < ext[a][0] + ext[b][0]) & (dy < ext[a][1] + ext[b][1])
            for t in np.nonzero(touching)[0]:
                hits.append((int(t), a, b))
    return sorted(hits)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

class Camera:
    def __init__(self, spec: CameraSpec, resolution: Tuple[int, int] = WORKING_RESOLUTION):
        self.scale = spec.scale
        e = math.radians(spec.elevation_deg)
        self.sin_e, self.cos_e = math.sin(e), math.cos(e)
        self.resolution = resolution
        self.cx = resolution[0] / 2.0
        self.cy = resolution[1] / 2.0 + spec.scale * VEHICLE_DIMS["car"][2] * self.cos_e / 2.0

    def ground_y(self, y: float) -> float:
        return self.cy + self.scale * y * self.sin_e

    def project(self, center: Sequence[float], extent: Tuple[float, float], height: float) -> BBox:
        s = self.scale
        x0 = self.cx + s * (center[0] - extent[0])
        x1 = self.cx + s * (center[0] + extent[0])
        y1 = self.cy + s * (center[1] + extent[1]) * self.sin_e
        y0 = self.cy + s * ((center[1] - extent[1]) * self.sin_e - height * self.cos_e)
        return (x0, y0, x1 - x0, y1 - y0)

    def visible_x(self) -> float:
        return self.resolution[0] / 2.0 / self.scale

    def visible_y(self) -> float:
        return self.resolution[1] / 2.0 / (self.scale * max(self.sin_e, 0.05))


def project_boxes(spec: ScenarioSpec, positions: Dict[int, np.ndarray]) -> Dict[int, Dict[int, BBox]]:
    cam = Camera(spec.camera)
    boxes: Dict[int, Dict[int, BBox]] = {t: {} for t in range(spec.duration)}
    for b in spec.behaviors:
        ext = footprint_extent(b)
        height = VEHICLE_DIMS[b.class_label][2]
        for t in range(spec.duration):
            p = positions[b.id][t]
            if not np.isnan(p[0]):
                boxes[t][b.id] = cam.project(p, ext, height)
    return boxes


def _fully_inside(bbox: BBox, resolution=WORKING_RESOLUTION) -> bool:
    x, y, w, h = bbox
    return x >= 0 and y >= 0 and x + w <= resolution[0] and y + h <= resolution[1]


def projected_occlusions(spec: ScenarioSpec, boxes, positions) -> List[Tuple[int, int, int]]:
    """Frames where two on-screen boxes overlap in the image but the footprints do not touch."""
    ext = {b.id: footprint_extent(b) for b in spec.behaviors}
    out = []
    for t, frame_boxes in boxes.items():
        ids = sorted(i for i, bb in frame_boxes.items() if _fully_inside(bb))
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                ba, bb = frame_boxes[a], frame_boxes[b]
                if (min(ba[0] + ba[2], bb[0] + bb[2]) - max(ba[0], bb[0]) > 0
                        and min(ba[1] + ba[3], bb[1] + bb[3]) - max(ba[1], bb[1]) > 0):
                    pa, pb = positions[a][t], positions[b][t]
                    if not (abs(pa[0] - pb[0]) < ext[a][0] + ext[b][0]
                            and abs(pa[1] - pb[1]) < ext[a][1] + ext[b][1]):
                        out.append((t, a, b))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, shape, cell: int) -> np.ndarray:
    import cv2

    small = rng.standard_normal((shape[0] // cell + 2, shape[1] // cell + 2)).astype(np.float32)
    big = cv2.resize(small, (shape[1] + 2 * cell, shape[0] + 2 * cell), interpolation=cv2.INTER_CUBIC)
    return big[cell:cell + shape[0], cell:cell + shape[1]]


def render_background(cam: Camera, rng: np.random.Generator) -> np.ndarray:
    w, h = cam.resolution
    bg = np.full((h, w), 60.0, dtype=np.float32)  # verge
    bg += 10.0 * _smooth_noise(rng, (h, w), 24)
    half = 2 * LANE_WIDTH
    top, bottom = cam.ground_y(-half), cam.ground_y(half)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    road_h = (ys >= top) & (ys < bottom)
    left = cam.cx + cam.scale * -LANE_WIDTH
    right = cam.cx + cam.scale * LANE_WIDTH
    road_v = (xs >= left) & (xs < right)
    road = road_h | road_v
    bg = np.where(road, ROAD_GRAY + 6.0 * _smooth_noise(rng, (h, w), 6), bg)
    # lane markings
    for k in (-1, 0, 1):
        yl = int(round(cam.ground_y(k * LANE_WIDTH)))
        if 0 <= yl < h:
            dashed = ((np.arange(w) // max(4, int(12 * cam.scale))) % 2 == 0) if k else np.ones(w, bool)
            bg[yl, dashed & ~road_v[0]] = 200.0
    xm = int(round(cam.cx))
    bg[~road_h[:, 0], xm] = 200.0
    return bg


def make_sprite(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    bright = rng.random() < 0.6
    body = rng.uniform(165, 235) if bright else rng.uniform(20, 55)
    sprite = np.full((h, w), body, dtype=np.float32)
    sprite += rng.normal(0.0, 10.0, (h, w)).astype(np.float32)
    # windows / roof features give the filter something to lock onto
    for _ in range(3):
        rw, rh = max(1, int(w * rng.uniform(0.15, 0.35))), max(1, int(h * rng.uniform(0.2, 0.45)))
        rx, ry = int(rng.integers(0, max(1, w - rw))), int(rng.integers(0, max(1, h - rh)))
        sprite[ry:ry + rh, rx:rx + rw] = rng.uniform(0, 255)
    sprite[0, :] = sprite[-1, :] = sprite[:, 0] = sprite[:, -1] = body * 0.45
    return np.clip(sprite, 0, 255)


def _composite(canvas: np.ndarray, sprite: np.ndarray, x: float, y: float) -> None:
    """Paint ``sprite`` with its top-left corner at subpixel position (x, y).

    Bilinear resampling spreads a fractional offset over the edge pixels, so slow
    vehicles drift smoothly instead of jumping a whole pixel now and then.
    """
    x0, y0 = int(np.floor(x)) - 1, int(np.floor(y)) - 1
    h, w = sprite.shape[0] + 3, sprite.shape[1] + 3
    shift = np.float32([[1, 0, x - x0], [0, 1, y - y0]])
    patch = cv2.warpAffine(sprite.astype(np.float32), shift, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    cover = cv2.warpAffine(np.ones(sprite.shape, np.float32), shift, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    H, W = canvas.shape
    cx0, cy0, cx1, cy1 = max(0, x0), max(0, y0), min(W, x0 + w), min(H, y0 + h)
    if cx1 <= cx0 or cy1 <= cy0:
        return
    p = patch[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
    a = cover[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
    region = canvas[cy0:cy1, cx0:cx1]
    region *= 1.0 - a
    region += p


def generate(spec: ScenarioSpec) -> Tuple[List[Frame], GroundTruth]:
    """Render ``spec``; the output is a pure function of the spec."""
    spec.validate()
    positions = simulate(spec)
    planned = [spec.crash_plan.pair] if spec.crash_plan else []
    contacts = world_contact(spec, positions, exclude=planned)
    if contacts:
        t, a, b = contacts[0]
        raise ValueError(f"unplanned contact between vehicles {a} and {b} at frame {t}")
    boxes = project_boxes(spec, positions)
    if spec.crash_plan is not None:
        a, b = spec.crash_plan.pair
        k = spec.crash_plan.impact_frame
        ba, bb = boxes[k].get(a), boxes[k].get(b)
        if ba is None or bb is None or not (
                min(ba[0] + ba[2], bb[0] + bb[2]) > max(ba[0], bb[0])
                and min(ba[1] + ba[3], bb[1] + bb[3]) > max(ba[1], bb[1])):
            raise ValueError("crash pair boxes do not overlap at the impact frame")

    rng = np.random.default_rng(spec.seed)
    cam = Camera(spec.camera)
    background = render_background(cam, rng)
    sprites = {}
    for beh in spec.behaviors:
        any_box = next((boxes[t][beh.id] for t in range(spec.duration) if beh.id in boxes[t]), None)
        if any_box is None:
            continue
        sw, sh = max(1, int(round(any_box[2]))), max(1, int(round(any_box[3])))
        sprites[beh.id] = make_sprite(rng, sw, sh)
    labels = {b.id: b.class_label for b in spec.behaviors}

    W, H = cam.resolution
    frames: List[Frame] = []
    detections: Dict[int, List[Detection]] = {}
    for t in range(spec.duration):
        canvas = background.copy()
        order = sorted(boxes[t], key=lambda vid: positions[vid][t][1])
        for vid in order:
            x, y, _, _ = boxes[t][vid]
            _composite(canvas, sprites[vid], x, y)
        if spec.noise > 0:
            canvas += spec.noise * rng.standard_normal((H, W), dtype=np.float32)
        frames.append(Frame(t, np.clip(np.rint(canvas), 0, 255).astype(np.uint8)))

        dets = []
        for vid in sorted(boxes[t]):
            bb = boxes[t][vid]
            if not _fully_inside(bb):
                continue
            j = rng.uniform(-spec.jitter, spec.jitter, 4) if spec.jitter > 0 else np.zeros(4)
            jb = (bb[0] + j[0], bb[1] + j[1], max(1.0, bb[2] + j[2]), max(1.0, bb[3] + j[3]))
            dets.append(Detection(t, labels[vid], tuple(float(v) for v in jb), float(rng.uniform(0.6, 0.99))))
        if dets:
            detections[t] = dets

    cp = spec.crash_plan
    truth = GroundTruth(
        detections=detections,
        boxes=boxes,
        positions={t: {vid: tuple(positions[vid][t]) for vid in boxes[t]} for t in range(spec.duration)},
        crash_label=cp is not None,
        crash_frame=cp.impact_frame if cp else None,
        involved_ids=tuple(cp.pair) if cp else (),
    )
    return frames, truth


def write_clip(out_dir: str | os.PathLike, spec: ScenarioSpec, frames: Sequence[Frame], truth: GroundTruth) -> Path:
    """Write frames (PGM directory), detection feed, spec and truth in the ingest formats."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_pgm(out / "frames" / f"frame_{f.index:06d}.pgm", f.pixels)
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        write_detections(truth.detections, fh, WORKING_RESOLUTION)
    (out / "spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    (out / "truth.json").write_text(json.dumps(truth.to_json()))
    return out


def load_spec(path: str | os.PathLike) -> ScenarioSpec:
    return ScenarioSpec.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Scenario archetypes
# ---------------------------------------------------------------------------

def _lane_direction(lane_y: float) -> float:
    return 1.0 if lane_y > 0 else -1.0


def _h_path(lane_y: float, direction: float, reach: float) -> List[Tuple[float, float]]:
    return [(-direction * reach, lane_y), (direction * reach, lane_y)]


class _Builder:
    """Accumulates vehicles for one scenario; ``reach`` is the off-screen distance paths extend to."""

    def __init__(self, rng: np.random.Generator, camera: CameraSpec, duration: int):
        self.rng = rng
        self.camera = camera
        self.duration = duration
        cam = Camera(camera)
        self.reach_x = cam.visible_x() + 120.0
        self.reach_y = cam.visible_y() + 120.0
        self.vehicles: List[VehicleBehavior] = []

    def add(self, label, path, profile, entry=0) -> int:
        vid = len(self.vehicles)
        self.vehicles.append(VehicleBehavior(vid, label, [tuple(map(float, p)) for p in path],
                                             [(int(f), float(s)) for f, s in profile], entry))
        return vid

    def straight_through(self, label: str, lane_y: float, speed: float, at_frame: int, x_at: float,
                         direction: Optional[float] = None) -> int:
        """Vehicle on a horizontal lane that is at ``x_at`` on ``at_frame``."""
        d = _lane_direction(lane_y) if direction is None else direction
        start_x = x_at - d * speed * at_frame
        end_x = d * self.reach_x * 2 + x_at
        return self.add(label, [(start_x, lane_y), (end_x, lane_y)], [(0, speed)])

    def background(self, count: int, lanes: Sequence[float], speed_range=(2.0, 4.5), label_p=None):
        """Constant-speed traffic on ``lanes``; vehicles in one lane share the lane speed."""
        if count <= 0 or not lanes:
            return
        lane_speed = {ly: float(self.rng.uniform(*speed_range)) for ly in lanes}
        lane_next_gap = {ly: float(self.rng.uniform(-self.reach_x * 0.6, 0.0)) for ly in lanes}
        for i in range(count):
            ly = lanes[i % len(lanes)]
            d = _lane_direction(ly)
            label = self._label(label_p)
            length = VEHICLE_DIMS[label][0]
            # position along the lane at frame 0, spaced so same-lane vehicles never touch
            offset = lane_next_gap[ly]
            lane_next_gap[ly] = offset - length - float(self.rng.uniform(70.0, 160.0))
            x0 = d * offset
            self.add(label, [(x0, ly), (d * (self.reach_x * 3 + abs(x0)), ly)], [(0, lane_speed[ly])])

    def _label(self, label_p=None) -> str:
        labels = ("car", "truck", "bus", "motorcycle")
        p = label_p or (0.7, 0.12, 0.08, 0.10)
        label = str(self.rng.choice(labels, p=p))
        if label == "motorcycle" and self.camera.scale < 1.0:
            label = "car"
        return label


def _crash_head_on(bld: _Builder, impact: int):
    rng = bld.rng
    lane = float(rng.choice(LANES_Y[1:3]))
    d = _lane_direction(lane)
    va, vb = rng.uniform(3.0, 5.0, 2)
    x_imp = rng.uniform(-0.3, 0.3) * bld.reach_x * 0.5
    la, lb = "car", bld._label((0.8, 0.1, 0.1, 0.0))
    half = (VEHICLE_DIMS[la][0] + VEHICLE_DIMS[lb][0]) / 2.0 - 4.0
    a = bld.straight_through(la, lane, va, impact, x_imp - d * half / 2.0, d)
    b = bld.straight_through(lb, lane, vb, impact, x_imp + d * half / 2.0, -d)
    return (a, b), [ly for ly in LANES_Y if ly != lane], (1.0, 1.0)


def _crash_rear_end(bld: _Builder, impact: int):
    rng = bld.rng
    lane = float(rng.choice(LANES_Y))
    d = _lane_direction(lane)
    va = rng.uniform(3.5, 5.5)
    vb = rng.uniform(0.5, 1.8)
    x_imp = rng.uniform(-0.3, 0.3) * bld.reach_x * 0.5
    la, lb = bld._label((0.85, 0.1, 0.05, 0.0)), bld._label((0.8, 0.1, 0.1, 0.0))
    half = (VEHICLE_DIMS[la][0] + VEHICLE_DIMS[lb][0]) / 2.0 - 4.0
    a = bld.straight_through(la, lane, va, impact, x_imp - d * half / 2.0)
    b = bld.straight_through(lb, lane, vb, impact, x_imp + d * half / 2.0)
    return (a, b), [ly for ly in LANES_Y if ly != lane], (1.0, -1.0)


def _cross_vehicle(bld: _Builder, label: str, lane_x: float, speed: float, at_frame: int, y_at: float,
                   stop_at: Optional[Tuple[int, float]] = None) -> int:
    d = 1.0 if lane_x < 0 else -1.0
    start_y = y_at - d * speed * at_frame
    end_y = y_at + d * bld.reach_y * 2
    profile = [(0, speed)]
    if stop_at is not None:
        brake_start, brake_frames = stop_at
        profile = [(0, speed), (brake_start, speed), (brake_start + brake_frames, 0.0)]
    return bld.add(label, [(lane_x, start_y), (lane_x, end_y)], profile)


def _crash_t_bone(bld: _Builder, impact: int):
    rng = bld.rng
    lane = float(rng.choice(LANES_Y[1:3]))
    d = _lane_direction(lane)
    cross_x = float(rng.choice(CROSS_LANES_X))
    va = rng.uniform(3.0, 5.0)
    vb = rng.uniform(2.5, 4.5)
    la = "car"
    ext_a = VEHICLE_DIMS[la][0] / 2.0
    # a's front bumper reaches 4 px into the crossing vehicle's side
    xa = cross_x - d * (ext_a + VEHICLE_DIMS["car"][1] / 2.0 - 4.0)
    a = bld.straight_through(la, lane, va, impact, xa, d)
    yb = lane + rng.uniform(-8.0, 8.0)
    b = _cross_vehicle(bld, "car", cross_x, vb, impact, yb)
    return (a, b), [ly for ly in LANES_Y if ly != lane], (1.0, 1.0)


def _near_miss_brake(bld: _Builder, conflict: int):
    """Crossing vehicle brakes hard and stops short of the lane the other vehicle is crossing."""
    rng = bld.rng
    lane = float(rng.choice(LANES_Y[1:3]))
    d = _lane_direction(lane)
    cross_x = float(rng.choice(CROSS_LANES_X))
    va = rng.uniform(3.0, 5.0)
    vb = rng.uniform(3.0, 4.5)
    xa = cross_x - d * (VEHICLE_DIMS["car"][0] / 2.0 + 6.0)
    a = bld.straight_through("car", lane, va, conflict, xa, d)
    db = 1.0 if cross_x < 0 else -1.0
    # stop with a gap of ``gap`` between b's front and a's footprint
    gap = rng.uniform(6.0, 20.0)
    y_stop = lane - db * (VEHICLE_DIMS["car"][1] / 2.0 + VEHICLE_DIMS["car"][0] / 2.0 + gap)
    brake_frames = int(rng.integers(5, 10))
    brake_dist = vb * brake_frames / 2.0
    brake_start = conflict - int(rng.integers(2, 6)) - brake_frames
    y_at_brake = y_stop - db * brake_dist
    start_y = y_at_brake - db * vb * brake_start
    b = bld.add("car", [(cross_x, start_y), (cross_x, start_y + db * bld.reach_y * 4)],
                [(0, vb), (brake_start, vb), (brake_start + brake_frames, 0.0)])
    return (a, b), [ly for ly in LANES_Y if ly != lane]


def _near_miss_swerve(bld: _Builder, conflict: int):
    """Wrong-way driver swerves into the adjacent lane shortly before a head-on impact."""
    rng = bld.rng
    lane = float(rng.choice(LANES_Y[1:3]))
    d = _lane_direction(lane)
    escape = lane + (LANE_WIDTH if lane > 0 else -LANE_WIDTH)
    va, vb = rng.uniform(3.0, 4.5, 2)
    x_meet = rng.uniform(-0.2, 0.2) * bld.reach_x * 0.5
    a = bld.straight_through("car", lane, va, conflict, x_meet - d * 24.0, d)
    swerve_frames = int(rng.integers(6, 10))
    lead = int(rng.integers(swerve_frames + 3, swerve_frames + 8))
    xb_meet = x_meet + d * 24.0
    xs = xb_meet + d * vb * lead  # b position when the swerve starts
    start = xs + d * vb * (conflict - lead)
    xe = xs - d * vb * swerve_frames
    b = bld.add("car", [(start, lane), (xs, lane), (xe, escape), (xe - d * bld.reach_x * 3, escape)],
                [(0, vb)])
    return (a, b), [ly for ly in LANES_Y if ly not in (lane, escape)]


def _occlusion_pass(bld: _Builder, meet: int):
    """Opposite-direction vehicles on the two middle lanes pass each other mid-frame."""
    rng = bld.rng
    va, vb = rng.uniform(2.5, 5.0, 2)
    x_meet = rng.uniform(-0.2, 0.2) * bld.reach_x * 0.5
    a = bld.straight_through(bld._label(), 20.0, va, meet, x_meet)
    b = bld.straight_through(bld._label(), -20.0, vb, meet, x_meet)
    return (a, b), [-60.0, 60.0]


def _overtake(bld: _Builder, meet: int):
    rng = bld.rng
    lanes = (20.0, 60.0) if rng.random() < 0.5 else (-20.0, -60.0)
    fast, slow = rng.uniform(3.5, 5.0), rng.uniform(1.0, 2.5)
    x_meet = rng.uniform(-0.2, 0.2) * bld.reach_x * 0.5
    a = bld.straight_through(bld._label(), lanes[0], fast, meet, x_meet)
    b = bld.straight_through(bld._label(), lanes[1], slow, meet, x_meet)
    return (a, b), [ly for ly in LANES_Y if ly not in lanes]


def _congestion(bld: _Builder, n: int, moving_fraction: float = 0.2):
    """Queues creeping on the main road; the few moving vehicles use the clear crossing road."""
    rng = bld.rng
    n_moving = int(round(n * moving_fraction))
    clear = LANE_WIDTH + 12.0  # keep the crossing box free
    slots = {ly: clear for ly in LANES_Y}
    for i in range(n - n_moving):
        ly = LANES_Y[i % len(LANES_Y)]
        d = _lane_direction(ly)
        label = bld._label((0.8, 0.1, 0.1, 0.0))
        length = VEHICLE_DIMS[label][0]
        # queues fill outwards from the crossing, alternating sides
        side = 1.0 if (i // len(LANES_Y)) % 2 == 0 else -1.0
        key = (ly, side)
        near = slots.get(key, clear)
        x = side * (near + length / 2.0)
        slots[key] = near + length + float(rng.uniform(14.0, 30.0))
        creep = float(rng.uniform(0.0, 0.05))
        # creep stops after 150 frames, short of the 12 px path end
        bld.add(label, [(x, ly), (x + d * 12.0, ly)], [(0, creep), (150, creep), (151, 0.0)])
    for k in range(n_moving):
        lane_x = CROSS_LANES_X[k % 2]
        db = 1.0 if lane_x < 0 else -1.0
        y0 = -db * (bld.reach_y * 0.5 + (k // 2) * 90.0)
        bld.add("car", [(lane_x, y0), (lane_x, y0 + db * bld.reach_y * 4)], [(0, float(rng.uniform(2.0, 3.5)))])
    return n_moving


CRASH_KINDS = ("head_on", "rear_end", "t_bone")
SAFE_KINDS = ("near_miss_brake", "near_miss_swerve", "occlusion_pass", "overtake", "flow", "congestion")


def build_spec(kind: str, seed: int, elevation: float, scale: float, n_vehicles: int,
               duration: Optional[int] = None, noise: float = 3.0, jitter: float = 0.75,
               max_attempts: int = 50) -> ScenarioSpec:
    """Construct a contact-free (except the planned crash) scenario of the given archetype."""
    camera = CameraSpec(float(elevation), float(scale))
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        event = int(rng.integers(50, 70))
        dur = duration or event + 45
        bld = _Builder(rng, camera, dur)
        crash = None
        free_lanes = list(LANES_Y)
        primary = 2
        if kind in CRASH_KINDS:
            builder = {"head_on": _crash_head_on, "rear_end": _crash_rear_end, "t_bone": _crash_t_bone}[kind]
            pair, free_lanes, signs = builder(bld, event)
            defl = rng.uniform(45.0, 80.0, 2) * np.array(signs)
            crash = CrashPlan(tuple(pair), event, (float(defl[0]), float(defl[1])),
                              tuple(float(v) for v in rng.uniform(0.1, 0.5, 2)), int(rng.integers(6, 14)))
        elif kind == "near_miss_brake":
            _, free_lanes = _near_miss_brake(bld, event)
        elif kind == "near_miss_swerve":
            _, free_lanes = _near_miss_swerve(bld, event)
        elif kind == "occlusion_pass":
            _, free_lanes = _occlusion_pass(bld, event)
        elif kind == "overtake":
            _, free_lanes = _overtake(bld, event)
        elif kind == "flow":
            primary = 0
        elif kind == "congestion":
            primary = 0
        else:
            raise ValueError(f"unknown scenario kind {kind!r}")

        if kind == "congestion":
            _congestion(bld, n_vehicles)
        else:
            bld.background(n_vehicles - primary, free_lanes)
        spec = ScenarioSpec(seed=int(seed), duration=dur, behaviors=bld.vehicles, camera=camera,
                            crash_plan=crash, noise=noise, jitter=jitter, kind=kind)
        try:
            spec.validate()
            positions = simulate(spec)
            if world_contact(spec, positions, exclude=[crash.pair] if crash else []):
                continue
            if crash is not None and not _crash_visible(spec, positions):
                continue
            return spec
        except ValueError:
            continue
    raise RuntimeError(f"could not build a valid {kind} scenario for seed {seed}")


def _crash_visible(spec: ScenarioSpec, positions) -> bool:
    boxes = project_boxes(spec, positions)
    k = spec.crash_plan.impact_frame
    a, b = spec.crash_plan.pair
    if a not in boxes[k] or b not in boxes[k]:
        return False
    if not (_fully_inside(boxes[k][a]) and _fully_inside(boxes[k][b])):
        return False
    ba, bb = boxes[k][a], boxes[k][b]
    return (min(ba[0] + ba[2], bb[0] + bb[2]) > max(ba[0], bb[0])
            and min(ba[1] + ba[3], bb[1] + bb[3]) > max(ba[1], bb[1]))


ELEVATIONS = (15.0, 45.0, 75.0)
SCALES = (0.5, 1.0, 2.0)
COUNTS = (2, 6, 12)
SUITE_SEED_BASE = {"acceptance": 1_000_000, "calibration": 2_000_000}


def suite(kind: str = "acceptance", seed: int = 0) -> List[ScenarioSpec]:
    """50 crash + 50 non-crash specs covering every elevation x scale x vehicle-count cell.

    Non-crash specs include near misses (one in ten) and, at the lowest
    elevation, always a projected overlap without contact.
    """
    if kind not in SUITE_SEED_BASE:
        raise ValueError(f"unknown suite {kind!r}")
    if not 0 <= seed < 1000:
        raise ValueError("suite seed must be in [0, 1000)")
    base = SUITE_SEED_BASE[kind] + seed * 1000
    specs = []
    for i in range(100):
        crash = i < 50
        j = i if crash else i - 50
        elevation = ELEVATIONS[j % 3]
        scale = SCALES[(j // 3) % 3]
        count = COUNTS[(j // 9) % 3]
        s = base + i
        if crash:
            archetype = CRASH_KINDS[(j + j // 3) % 3]
        elif j % 10 == 0:
            archetype = ("near_miss_brake", "near_miss_swerve")[(j // 10) % 2]
        elif elevation == ELEVATIONS[0]:
            archetype = ("occlusion_pass", "overtake")[(j // 3) % 2]
        else:
            archetype = ("flow", "occlusion_pass", "overtake", "congestion")[(j // 3) % 4]
        spec = build_spec(archetype, s, elevation, scale, count)
        if not crash and elevation == ELEVATIONS[0]:
            spec = _ensure_occlusion(spec, archetype, s, elevation, scale, count)
        specs.append(spec)
    return specs


def _ensure_occlusion(spec, archetype, seed, elevation, scale, count):
    for extra in range(20):
        positions = simulate(spec)
        if projected_occlusions(spec, project_boxes(spec, positions), positions):
            return spec
        spec = build_spec(archetype, seed + 7919 * (extra + 1), elevation, scale, count)
    raise RuntimeError(f"no occlusion event found for low-elevation spec {seed}")


def congested_spec(seed: int = 0, n_vehicles: int = 10, duration: int = 150, scale: float = 1.0,
                   elevation: float = 45.0) -> ScenarioSpec:
    """Mostly stopped traffic (80% creeping below the TCFI threshold)."""
    return build_spec("congestion", seed, elevation, scale, n_vehicles, duration=duration)


def benchmark_spec(n_vehicles: int, seed: int = 0, duration: int = 150) -> ScenarioSpec:
    """Free-flowing traffic with every vehicle on screen from frame 0."""
    camera = CameraSpec(45.0, 1.0)
    rng = np.random.default_rng([seed, n_vehicles])
    bld = _Builder(rng, camera, duration)
    per_lane: Dict[float, List[int]] = {ly: [] for ly in LANES_Y}
    lane_speed = {ly: float(rng.uniform(0.8, 1.4)) for ly in LANES_Y}
    cursor = {ly: -200.0 for ly in LANES_Y}
    for i in range(n_vehicles):
        ly = LANES_Y[i % 4]
        d = _lane_direction(ly)
        x = cursor[ly]
        cursor[ly] = x + VEHICLE_DIMS["car"][0] + 60.0
        vid = bld.add("car", [(d * x, ly), (d * (x + 9000.0), ly)], [(0, lane_speed[ly])])
        per_lane[ly].append(vid)
    return ScenarioSpec(seed=seed, duration=duration, behaviors=bld.vehicles, camera=camera, kind="flow")
