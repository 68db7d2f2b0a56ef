"""Incident events: emission, deduplication, persistence and webhook notification.

Location is static per camera and the wall-clock time of an event is derived
from the stream start plus the frame index.  The webhook fires as soon as an
event passes deduplication; its ``incidents.jsonl`` record is written once the
clip frames up to ``frame_end`` have been stored (or the stream ended).  The
file is rewritten through a temp file and ``os.replace`` on every append, so a
reader never sees a partial line even if the process dies mid-write.
"""
from __future__ import annotations

import json
import logging
import math
import os
import queue
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .collision import CONFIRMED, CollisionCandidate
from .errors import ReporterError
from .ingest import write_pgm

log = logging.getLogger(__name__)

COLLISION_ONLY = "COLLISION_ONLY"
COLLISION_PLUS_VIF = "COLLISION_PLUS_VIF"
MODES = (COLLISION_ONLY, COLLISION_PLUS_VIF)

EVENT = "EVENT"
DUPLICATE = "DUPLICATE"
SUPPRESSED = "SUPPRESSED"

DELIVERED = "DELIVERED"
FAILED = "FAILED"
SKIPPED = "SKIPPED"

CAMERA_FIELDS = ("camera_id", "latitude", "longitude", "city", "location_name", "stream_start", "fps")


@dataclass(frozen=True)
class CameraConfig:
    camera_id: str
    latitude: float
    longitude: float
    city: str
    location_name: str
    stream_start: datetime
    fps: float

    def __post_init__(self):
        if not self.camera_id:
            raise ReporterError("camera_id must be non-empty")
        if not -90.0 <= self.latitude <= 90.0:
            raise ReporterError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ReporterError(f"longitude {self.longitude} outside [-180, 180]")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ReporterError(f"fps must be positive, got {self.fps}")

    @classmethod
    def from_mapping(cls, data: Mapping[str, object]) -> "CameraConfig":
        missing = [k for k in CAMERA_FIELDS if data.get(k) in (None, "")]
        if missing:
            raise ReporterError(f"camera config missing field(s): {', '.join(missing)}")
        start = data["stream_start"]
        if not isinstance(start, datetime):
            try:
                start = datetime.fromisoformat(str(start))
            except ValueError:
                raise ReporterError(f"stream_start {start!r} is not an ISO-8601 timestamp") from None
        try:
            return cls(str(data["camera_id"]), float(data["latitude"]), float(data["longitude"]),
                       str(data["city"]), str(data["location_name"]), start, float(data["fps"]))
        except (TypeError, ValueError) as exc:
            raise ReporterError(f"camera config: {exc}") from None

    def time_of(self, frame_index: int) -> datetime:
        return self.stream_start + timedelta(seconds=frame_index / self.fps)


@dataclass(frozen=True)
class IncidentEvent:
    event_id: str
    camera_id: str
    latitude: float
    longitude: float
    city: str
    location_name: str
    date: str
    time: str
    timestamp: str
    due_frame: int
    frame_start: int
    frame_end: int
    vehicle_ids: Tuple[int, ...]
    method: str
    confidence: float
    clip_ref: str

    def __post_init__(self):
        if self.frame_start > self.frame_end:
            raise ReporterError(f"frame_start {self.frame_start} > frame_end {self.frame_end}")
        if not self.vehicle_ids:
            raise ReporterError("an incident needs at least one vehicle")

    def to_json(self) -> dict:
        out = asdict(self)
        out["vehicle_ids"] = list(self.vehicle_ids)
        return out

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass(frozen=True)
class Suppressed:
    candidate_pair: Tuple[int, int]
    due_frame: int
    reason: str


def _confidence(candidate: CollisionCandidate, verdicts: Optional[Mapping[int, Tuple[int, float]]]) -> float:
    if verdicts:
        return float(max(m for _, m in verdicts.values()))
    ratio = candidate.diagnostics.get("deviation_ratio")
    return float(ratio) if ratio is not None and math.isfinite(ratio) else 0.0


def emit_incident(candidate: CollisionCandidate, svm_verdict: Optional[Mapping[int, Tuple[int, float]]],
                  camera: CameraConfig, mode: str = COLLISION_ONLY, trailing: int = 30,
                  last_frame: Optional[int] = None, clip_root: str = "clips"):
    """IncidentEvent for a confirmed candidate, or :class:`Suppressed`.

    ``svm_verdict`` maps involved track id to ``(label, margin)``.  In combined
    mode at least one involved track must be labeled +1.
    """
    if camera is None:
        raise ReporterError("camera config missing")
    if candidate.status != CONFIRMED:
        raise ReporterError(f"candidate {candidate.pair} is {candidate.status}, not CONFIRMED")
    if mode not in MODES:
        raise ReporterError(f"unknown mode {mode!r}")
    if mode == COLLISION_PLUS_VIF:
        if not svm_verdict:
            return Suppressed(candidate.pair, candidate.due_frame, "vif-unavailable")
        if not any(label == 1 for label, _ in svm_verdict.values()):
            return Suppressed(candidate.pair, candidate.due_frame, "svm-negative")
    when = camera.time_of(candidate.due_frame)
    frame_end = candidate.due_frame + trailing
    if last_frame is not None:
        frame_end = min(frame_end, max(last_frame, candidate.created_frame))
    event_id = f"{camera.camera_id}-{candidate.due_frame:06d}-{candidate.pair[0]}-{candidate.pair[1]}"
    return IncidentEvent(
        event_id=event_id,
        camera_id=camera.camera_id,
        latitude=camera.latitude,
        longitude=camera.longitude,
        city=camera.city,
        location_name=camera.location_name,
        date=when.date().isoformat(),
        time=when.time().isoformat(timespec="milliseconds"),
        timestamp=when.isoformat(timespec="milliseconds"),
        due_frame=candidate.due_frame,
        frame_start=candidate.created_frame,
        frame_end=frame_end,
        vehicle_ids=tuple(candidate.pair),
        method=mode,
        confidence=_confidence(candidate, svm_verdict if mode == COLLISION_PLUS_VIF else None),
        clip_ref=f"{clip_root}/{event_id}",
    )


def dedup(event: IncidentEvent, recent: Sequence[IncidentEvent], window: int = 60) -> str:
    """DUPLICATE if an earlier event within ``window`` frames shares a vehicle."""
    ids = set(event.vehicle_ids)
    for prev in reversed(recent):
        if event.due_frame - prev.due_frame > window:
            break
        if ids & set(prev.vehicle_ids):
            return DUPLICATE
    return EVENT


def append_jsonl_atomic(path: Path, line: str) -> None:
    """Append one line by writing the whole file to a temp name and renaming it over the original."""
    existing = path.read_bytes() if path.exists() else b""
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(existing + line.encode("utf-8") + b"\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass
class NotifyResult:
    event_id: str
    status: str
    attempts: int = 0
    detail: str = ""

    def label(self) -> str:
        return f"{FAILED}({self.attempts})" if self.status == FAILED else self.status


def notify(event: IncidentEvent, endpoint: Optional[str], retries: int = 3, timeout: float = 5.0,
           backoff: Sequence[float] = (0.5, 1.0, 2.0), sleep: Callable[[float], None] = time.sleep) -> NotifyResult:
    """POST the event JSON; retries with exponential backoff until a 2xx or ``retries`` attempts."""
    if not endpoint:
        return NotifyResult(event.event_id, SKIPPED)
    body = json.dumps(event.to_json()).encode("utf-8")
    detail = ""
    for attempt in range(1, retries + 1):
        req = urllib.request.Request(endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                if 200 <= resp.status < 300:
                    return NotifyResult(event.event_id, DELIVERED, attempt)
                detail = f"HTTP {resp.status}"
        except urllib.error.HTTPError as exc:
            detail = f"HTTP {exc.code}"
        except (urllib.error.URLError, OSError) as exc:
            detail = str(getattr(exc, "reason", exc))
        if attempt < retries:
            sleep(backoff[min(attempt - 1, len(backoff) - 1)])
    log.warning("webhook delivery of %s failed after %d attempts: %s", event.event_id, retries, detail)
    return NotifyResult(event.event_id, FAILED, retries, detail)


class Notifier:
    """Background sender; one worker thread keeps per-camera delivery order."""

    def __init__(self, endpoint: Optional[str], retries: int = 3, timeout: float = 5.0):
        self.endpoint = endpoint
        self.retries = retries
        self.timeout = timeout
        self.results: List[NotifyResult] = []
        self._queue: "queue.Queue[Optional[IncidentEvent]]" = queue.Queue()
        self._thread: Optional[threading.Thread] = None

    def submit(self, event: IncidentEvent) -> None:
        if not self.endpoint:
            self.results.append(NotifyResult(event.event_id, SKIPPED))
            return
        if self._thread is None:
            self._thread = threading.Thread(target=self._work, name="webhook", daemon=True)
            self._thread.start()
        self._queue.put(event)

    def _work(self) -> None:
        while True:
            event = self._queue.get()
            if event is None:
                return
            self.results.append(notify(event, self.endpoint, self.retries, self.timeout))

    def close(self) -> None:
        if self._thread is not None:
            self._queue.put(None)
            self._thread.join()
            self._thread = None


@dataclass
class ReporterSettings:
    dedup_window: int = 60
    trailing_frames: int = 30
    webhook: Optional[str] = None
    timeout: float = 5.0
    retries: int = 3


@dataclass
class _ClipWriter:
    event: IncidentEvent
    directory: Optional[Path]
    written: int = 0

    @property
    def complete(self) -> bool:
        return self.written >= self.event.frame_end - self.event.frame_start + 1


class Reporter:
    """Single serialized sink for confirmed candidates of one camera.

    With ``out_dir=None`` nothing is written to disk (evaluation runs).
    """

    def __init__(self, camera: CameraConfig, mode: str = COLLISION_ONLY, out_dir=None,
                 settings: Optional[ReporterSettings] = None):
        if mode not in MODES:
            raise ReporterError(f"unknown mode {mode!r}")
        self.camera = camera
        self.mode = mode
        self.settings = settings or ReporterSettings()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.events: List[IncidentEvent] = []
        self.suppressed: List[Suppressed] = []
        self.duplicates: List[IncidentEvent] = []
        self.errors: List[str] = []
        self.audit = Counter(confirmed=0, events=0, duplicates=0, suppressed=0)
        self._clips: List[_ClipWriter] = []
        self.notifier = Notifier(self.settings.webhook, self.settings.retries, self.settings.timeout)
        if self.out_dir is not None:
            try:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                (self.out_dir / "incidents.jsonl").write_bytes(b"")
            except OSError as exc:
                self._error(f"cannot prepare store {self.out_dir}: {exc}")

    def _error(self, message: str) -> None:
        log.error(message)
        self.errors.append(message)

    @property
    def incidents_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "incidents.jsonl"

    def submit(self, candidate: CollisionCandidate, verdicts=None, frames: Optional[Mapping[int, object]] = None):
        """Emit, deduplicate, persist and notify; returns the outcome tag and payload."""
        self.audit["confirmed"] += 1
        result = emit_incident(candidate, verdicts, self.camera, self.mode, self.settings.trailing_frames)
        if isinstance(result, Suppressed):
            self.audit["suppressed"] += 1
            self.suppressed.append(result)
            return SUPPRESSED, result
        if dedup(result, self.events, self.settings.dedup_window) == DUPLICATE:
            self.audit["duplicates"] += 1
            self.duplicates.append(result)
            return DUPLICATE, result
        self.audit["events"] += 1
        self.events.append(result)
        self.notifier.submit(result)
        self._persist(result, frames or {})
        return EVENT, result

    def _persist(self, event: IncidentEvent, frames: Mapping[int, object]) -> None:
        clip_dir = None
        if self.out_dir is not None:
            clip_dir = self.out_dir / event.clip_ref
            try:
                clip_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                self._error(f"clip directory for {event.event_id} failed: {exc}")
                clip_dir = None
        writer = _ClipWriter(event, clip_dir)
        self._clips.append(writer)
        self._advance(writer, frames)

    def _advance(self, writer: _ClipWriter, frames: Mapping[int, object]) -> None:
        ev = writer.event
        for idx in range(ev.frame_start + writer.written, ev.frame_end + 1):
            frame = frames.get(idx)
            if frame is None:
                break
            if writer.directory is not None:
                try:
                    write_pgm(writer.directory / f"frame_{idx:06d}.pgm", getattr(frame, "pixels", frame))
                except OSError as exc:
                    self._error(f"clip frame {idx} of {ev.event_id} failed: {exc}")
            writer.written += 1

    def _finalize(self, writer: _ClipWriter) -> None:
        """Write the JSONL record once the clip range is settled."""
        ev = writer.event
        if writer.written < ev.frame_end - ev.frame_start + 1:
            log.info("clip %s truncated at end of stream (%d of %d frames)",
                     ev.event_id, writer.written, ev.frame_end - ev.frame_start + 1)
            ev = replace(ev, frame_end=ev.frame_start + max(writer.written, 1) - 1)
            self.events[self.events.index(writer.event)] = ev
        if self.out_dir is None:
            return
        try:
            append_jsonl_atomic(self.out_dir / "incidents.jsonl", ev.to_line())
        except OSError as exc:
            self._error(f"persisting {ev.event_id} failed: {exc}")

    def on_frame(self, frames: Mapping[int, object]) -> None:
        """Extend open clips with newly buffered frames and record finished events, oldest first."""
        for writer in self._clips:
            self._advance(writer, frames)
        while self._clips and self._clips[0].complete:
            self._finalize(self._clips.pop(0))

    def pending_clip_start(self) -> Optional[int]:
        """Oldest frame index a still-open clip needs."""
        starts = [w.event.frame_start + w.written for w in self._clips]
        return min(starts) if starts else None

    def close(self) -> Dict[str, object]:
        """Finish open clips (truncated at the end of the stream) and flush notifications."""
        while self._clips:
            self._finalize(self._clips.pop(0))
        self.notifier.close()
        a = self.audit
        if a["confirmed"] != a["events"] + a["duplicates"] + a["suppressed"]:
            raise ReporterError(f"audit mismatch: {dict(a)}")
        return {
            "audit": dict(a),
            "suppressed_reasons": dict(Counter(s.reason for s in self.suppressed)),
            "notifications": [{"event_id": r.event_id, "status": r.label(), "detail": r.detail}
                              for r in self.notifier.results],
            "errors": list(self.errors),
        }
