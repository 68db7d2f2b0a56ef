"""Pipeline configuration: INI file (``[section]`` + ``key = value``) with exhaustive validation.

Every problem in a file is collected and reported together in one
:class:`~crashdet.errors.ConfigError`; nothing runs on an invalid config.
"""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import WORKING_RESOLUTION
from .collision import CollisionParams
from .errors import ConfigError, ReporterError
from .flow_vif import FlowParams
from .ingest import VEHICLE_CLASSES
from .reporter import COLLISION_ONLY, MODES, CameraConfig, ReporterSettings
from .tracking import DEFAULT_ALPHA, TrackerParams

FRAME_KINDS = ("image-directory", "raw-stream")


@dataclass
class SvmSettings:
    model: Optional[str] = None
    C: float = 1.0
    epochs: int = 200
    # replicate the rarer class so both weigh alike in the hinge sum
    balance: bool = True


@dataclass
class PipelineConfig:
    mode: str = COLLISION_ONLY
    seed: int = 0
    frames: Optional[str] = None
    frame_source: str = "image-directory"
    detections: Optional[str] = None
    out: Optional[str] = None
    nms_iou: float = 0.45
    resolution: Tuple[int, int] = WORKING_RESOLUTION
    frame_buffer: int = 64
    tracker: TrackerParams = field(default_factory=TrackerParams)
    collision: CollisionParams = field(default_factory=CollisionParams)
    flow: FlowParams = field(default_factory=FlowParams)
    svm: SvmSettings = field(default_factory=SvmSettings)
    camera: CameraConfig = field(default_factory=lambda: default_camera())
    reporter: ReporterSettings = field(default_factory=ReporterSettings)


def default_camera() -> CameraConfig:
    return CameraConfig("cam-0", 0.0, 0.0, "unset", "unset", datetime(2020, 1, 1), 30.0)


# ---------------------------------------------------------------------------
# Field validators
# ---------------------------------------------------------------------------

def _number(kind: type, lo: Optional[float] = None, hi: Optional[float] = None,
            lo_open: bool = False) -> Callable[[str], Any]:
    def parse(raw: str):
        try:
            value = kind(raw)
        except ValueError:
            raise ValueError(f"expected {kind.__name__}, got {raw!r}") from None
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError(f"must be finite, got {raw!r}")
        if lo is not None and (value <= lo if lo_open else value < lo):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {value}")
        if hi is not None and value > hi:
            raise ValueError(f"must be <= {hi}, got {value}")
        return value
    return parse


def _boolean(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _choice(options) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {raw!r}")
        return raw
    return parse


def _text(raw: str) -> str:
    if not raw.strip():
        raise ValueError("must not be empty")
    return raw.strip()


def _optional_text(raw: str) -> Optional[str]:
    return raw.strip() or None


def _timestamp(raw: str) -> datetime:
    try:
        return datetime.fromisoformat(raw.strip())
    except ValueError:
        raise ValueError(f"expected an ISO-8601 timestamp, got {raw!r}") from None


def _url(raw: str) -> Optional[str]:
    raw = raw.strip()
    if not raw:
        return None
    if not raw.startswith(("http://", "https://")):
        raise ValueError(f"webhook must be an http(s) URL, got {raw!r}")
    return raw


_pos = dict(lo=0.0, lo_open=True)

SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "pipeline": {
        "mode": _choice(MODES),
        "seed": _number(int, 0),
        "frames": _optional_text,
        "frame_source": _choice(FRAME_KINDS),
        "detections": _optional_text,
        "out": _optional_text,
        "nms_iou": _number(float, 0.0, 1.0),
        "width": _number(int, 16),
        "height": _number(int, 16),
        "frame_buffer": _number(int, 45),
    },
    "tracking": {
        "min_speed": _number(float, 0.0),
        "tcfi": _boolean,
        "tcfi_stride": _number(int, 1),
        "iou_floor": _number(float, 0.0, 1.0, lo_open=True),
        "max_missed": _number(int, 1),
        "snap_distance": _number(float, 0.0),
        "psr_threshold": _number(float, 0.0),
        "sigma": _number(float, **_pos),
        "learning_rate": _number(float, 0.0, 1.0, lo_open=True),
        "perturbations": _number(int, 0),
        "max_rotation_deg": _number(float, 0.0, 45.0),
        "max_scale_change": _number(float, 0.0, 0.5),
        "epsilon": _number(float, **_pos),
        "window": _number(int, 16),
        "min_patch": _number(float, 8.0),
        "history": _number(int, 30),
    },
    "alpha": {cls: _number(float, **_pos) for cls in VEHICLE_CLASSES},
    "collision": {
        "speed_limit": _number(float, 0.0),
        "horizon": _number(int, 1),
        "speed_window": _number(int, 1),
        "min_history": _number(int, 2),
    },
    "flow": {
        "smoothness": _number(float, **_pos),
        "iterations": _number(int, 1),
        "tolerance": _number(float, 0.0),
        "grid_rows": _number(int, 1),
        "grid_cols": _number(int, 1),
        "bins": _number(int, 1),
        "crop_size": _number(int, 8),
        "crop_inflation": _number(float, 0.0, 2.0),
        "sequence_length": _number(int, 3, 30),
    },
    "svm": {
        "model": _optional_text,
        "C": _number(float, **_pos),
        "epochs": _number(int, 1),
        "balance": _boolean,
    },
    "camera": {
        "camera_id": _text,
        "latitude": _number(float, -90.0, 90.0),
        "longitude": _number(float, -180.0, 180.0),
        "city": _text,
        "location_name": _text,
        "stream_start": _timestamp,
        "fps": _number(float, **_pos),
    },
    "reporter": {
        "dedup_window": _number(int, 0),
        "trailing_frames": _number(int, 0),
        "webhook": _url,
        "timeout": _number(float, **_pos),
        "retries": _number(int, 1),
    },
}


def _parse(text: str, source: str) -> Tuple[Dict[str, Dict[str, Any]], List[str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep "C" distinct from "c"
    errors: List[str] = []
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        return {}, [f"{source}: {exc}".replace("\n", " ")]
    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        schema = SCHEMA.get(section)
        if schema is None:
            errors.append(f"[{section}]: unknown section (expected one of {', '.join(SCHEMA)})")
            continue
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in schema:
                errors.append(f"[{section}] {key}: unknown key")
                continue
            try:
                values[section][key] = schema[key](raw)
            except ValueError as exc:
                errors.append(f"[{section}] {key}: {exc}")
    return values, errors


def build_config(values: Dict[str, Dict[str, Any]], errors: Optional[List[str]] = None) -> PipelineConfig:
    """Apply parsed values over the defaults and run the cross-field checks."""
    errors = list(errors or [])
    cfg = PipelineConfig()
    pipe = values.get("pipeline", {})
    for key in ("mode", "seed", "frames", "frame_source", "detections", "out", "nms_iou", "frame_buffer"):
        if key in pipe:
            setattr(cfg, key, pipe[key])
    cfg.resolution = (pipe.get("width", WORKING_RESOLUTION[0]), pipe.get("height", WORKING_RESOLUTION[1]))
    for key, value in values.get("tracking", {}).items():
        setattr(cfg.tracker, key, value)
    cfg.tracker.alpha = {**DEFAULT_ALPHA, **values.get("alpha", {})}
    for key, value in values.get("collision", {}).items():
        setattr(cfg.collision, key, value)
    cfg.collision.frame_area = float(cfg.resolution[0] * cfg.resolution[1])
    flow = dict(values.get("flow", {}))
    rows, cols = flow.pop("grid_rows", cfg.flow.grid[0]), flow.pop("grid_cols", cfg.flow.grid[1])
    cfg.flow.grid = (rows, cols)
    for key, value in flow.items():
        setattr(cfg.flow, key, value)
    for key, value in values.get("svm", {}).items():
        setattr(cfg.svm, key, value)
    for key, value in values.get("reporter", {}).items():
        setattr(cfg.reporter, key, value)

    cam = values.get("camera")
    if cam is not None:
        try:
            cfg.camera = CameraConfig.from_mapping(cam)
        except ReporterError as exc:
            errors.append(f"[camera]: {exc}")

    if cfg.mode != COLLISION_ONLY and not cfg.svm.model:
        errors.append(f"[svm] model: required when mode = {cfg.mode}")
    if cfg.flow.crop_size % cfg.flow.grid[0] or cfg.flow.crop_size % cfg.flow.grid[1]:
        errors.append(f"[flow] crop_size {cfg.flow.crop_size} is not divisible by grid "
                      f"{cfg.flow.grid[0]}x{cfg.flow.grid[1]}")
    if cfg.collision.min_history > cfg.tracker.history:
        errors.append(f"[collision] min_history {cfg.collision.min_history} exceeds "
                      f"[tracking] history {cfg.tracker.history}")
    if cfg.tracker.history < cfg.flow.sequence_length:
        errors.append(f"[tracking] history {cfg.tracker.history} shorter than "
                      f"[flow] sequence_length {cfg.flow.sequence_length}")
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    values, errors = _parse(text, source)
    return build_config(values, errors)


def load_config(path: Optional[str | os.PathLike] = None) -> PipelineConfig:
    """Defaults when ``path`` is None; otherwise the validated file contents."""
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    return parse_config(text, str(path))


def dump_config(cfg: PipelineConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    t, c, f, cam, rep = cfg.tracker, cfg.collision, cfg.flow, cfg.camera, cfg.reporter

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return ""
        return repr(v) if isinstance(v, float) else str(v)

    sections = {
        "pipeline": dict(mode=cfg.mode, seed=cfg.seed, frames=cfg.frames, frame_source=cfg.frame_source,
                         detections=cfg.detections, out=cfg.out, nms_iou=cfg.nms_iou,
                         width=cfg.resolution[0], height=cfg.resolution[1], frame_buffer=cfg.frame_buffer),
        "tracking": {k: getattr(t, k) for k in SCHEMA["tracking"]},
        "alpha": {k: t.alpha[k] for k in VEHICLE_CLASSES},
        "collision": {k: getattr(c, k) for k in SCHEMA["collision"]},
        "flow": dict(smoothness=f.smoothness, iterations=f.iterations, tolerance=f.tolerance,
                     grid_rows=f.grid[0], grid_cols=f.grid[1], bins=f.bins, crop_size=f.crop_size,
                     crop_inflation=f.crop_inflation, sequence_length=f.sequence_length),
        "svm": dict(model=cfg.svm.model, C=cfg.svm.C, epochs=cfg.svm.epochs, balance=cfg.svm.balance),
        "camera": dict(camera_id=cam.camera_id, latitude=cam.latitude, longitude=cam.longitude, city=cam.city,
                       location_name=cam.location_name, stream_start=cam.stream_start.isoformat(), fps=cam.fps),
        "reporter": {k: getattr(rep, k) for k in SCHEMA["reporter"]},
    }
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)
