"""Per-frame orchestration: ingest -> tracking -> collision cascade -> (ViF -> SVM) -> reporter.

In combined mode a confirmed candidate waits until each involved track has
``sequence_length`` history entries (or is gone, or ``sequence_length``
frames have passed since the due frame) before the classifier verdicts are
handed to the reporter.  Candidates leave that queue in due order, so event
timestamps never go backwards.
"""
from __future__ import annotations

import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import IO, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .collision import CONFIRMED, CollisionCandidate, CollisionEstimator
from .config import PipelineConfig
from .errors import FlowError
from .flow_vif import DescriptorCache
from .ingest import Detection, Frame, nms, normalize_frame
from .reporter import COLLISION_PLUS_VIF, EVENT, Reporter
from .svm import SvmModel, predict
from .tracking import Tracker, TrackSnapshot, track_dump_line

log = logging.getLogger(__name__)


@dataclass
class VifJob:
    candidate: CollisionCandidate
    deadline: int
    verdicts: Dict[int, Tuple[int, float]] = field(default_factory=dict)
    features: Dict[int, np.ndarray] = field(default_factory=dict)
    unavailable: Dict[int, str] = field(default_factory=dict)

    def decided(self) -> bool:
        return all(t in self.features or t in self.unavailable for t in self.candidate.pair)

    def positive(self) -> bool:
        return any(label == 1 for label, _ in self.verdicts.values())


class VifStage:
    """Computes descriptors (and verdicts, given a model) for queued candidates."""

    def __init__(self, cfg: PipelineConfig, model: Optional[SvmModel] = None):
        self.cfg = cfg
        self.model = model
        self.cache = DescriptorCache(cfg.flow)
        self.queue: List[VifJob] = []
        self.descriptors_computed = 0

    def add(self, candidate: CollisionCandidate) -> None:
        self.queue.append(VifJob(candidate, candidate.due_frame + self.cfg.flow.sequence_length))

    def _fill(self, job: VifJob, tracks: Mapping[int, TrackSnapshot], frames: Mapping[int, Frame]) -> None:
        need = self.cfg.flow.sequence_length
        for tid in job.candidate.pair:
            if tid in job.features or tid in job.unavailable:
                continue
            track = tracks.get(tid)
            if track is None:
                job.unavailable[tid] = "track-retired"
                continue
            if len(track.history) < need:
                continue
            try:
                feature = self.cache.descriptor(track, frames).values
            except FlowError as exc:
                job.unavailable[tid] = str(exc)
                continue
            self.descriptors_computed += 1
            job.features[tid] = feature
            if self.model is not None:
                job.verdicts[tid] = predict(self.model, feature)

    def step(self, tracks: Mapping[int, TrackSnapshot], frames: Mapping[int, Frame], frame_index: int,
             flush: bool = False) -> List[VifJob]:
        """Jobs that are ready, oldest first; later jobs wait behind an undecided one."""
        for job in self.queue:
            self._fill(job, tracks, frames)
        ready = []
        while self.queue:
            job = self.queue[0]
            if flush or job.decided() or job.positive() or frame_index >= job.deadline:
                for tid in job.candidate.pair:
                    if tid not in job.features and tid not in job.unavailable:
                        job.unavailable[tid] = "history-too-short"
                ready.append(self.queue.pop(0))
            else:
                break
        if not self.queue:
            self.cache.forget(frame_index - self.cfg.flow.sequence_length)
        return ready


class Pipeline:
    """Processes one camera stream frame by frame.

    ``out_dir=None`` keeps everything in memory.  With ``collect_features`` every
    resolved candidate (confirmed or rejected) is sent through the descriptor
    stage and ``self.harvested`` receives ``(candidate, {track_id: feature})``.
    """

    def __init__(self, cfg: PipelineConfig, model: Optional[SvmModel] = None, out_dir=None,
                 trace: Optional[IO[str]] = None, collect_features: bool = False):
        if cfg.mode == COLLISION_PLUS_VIF and model is None:
            raise ValueError("combined mode needs an SVM model")
        self.cfg = cfg
        self.tracker = Tracker(cfg.tracker, seed=cfg.seed, frame_size=cfg.resolution)
        self.estimator = CollisionEstimator(cfg.collision, trace=trace)
        self.reporter = Reporter(cfg.camera, cfg.mode, out_dir, cfg.reporter)
        self.trace = trace
        self.collect_features = collect_features
        self.vif = VifStage(cfg, model if cfg.mode == COLLISION_PLUS_VIF else None) \
            if (cfg.mode == COLLISION_PLUS_VIF or collect_features) else None
        self.frames: "OrderedDict[int, Frame]" = OrderedDict()
        self.harvested: List[Tuple[CollisionCandidate, Dict[int, np.ndarray]]] = []
        self.resolved: List[CollisionCandidate] = []
        self.frames_processed = 0
        self.seconds = 0.0
        self.last_frame: Optional[int] = None
        self._tracks: Dict[int, TrackSnapshot] = {}

    def _prune(self, frame_index: int) -> None:
        keep_from = frame_index - self.cfg.frame_buffer + 1
        clip_start = self.reporter.pending_clip_start()
        if clip_start is not None:
            keep_from = min(keep_from, clip_start)
        while self.frames and next(iter(self.frames)) < keep_from:
            self.frames.popitem(last=False)

    def process(self, frame: Frame, detections: Optional[Sequence[Detection]] = None) -> List[CollisionCandidate]:
        """Advance one frame; returns the candidates resolved on it."""
        t0 = time.perf_counter()
        frame = normalize_frame(frame, self.cfg.resolution)
        self.frames[frame.index] = frame
        dets = nms(detections, self.cfg.nms_iou) if detections else ([] if detections is not None else None)
        snapshots = self.tracker.step(frame, dets)
        self._tracks = {s.id: s for s in snapshots}
        if self.trace is not None:
            self.trace.write(track_dump_line(frame.index, snapshots) + "\n")
        _, resolved = self.estimator.update(snapshots, frame.index)
        self.resolved.extend(resolved)
        for cand in resolved:
            if self.vif is not None and (self.collect_features or cand.status == CONFIRMED):
                self.vif.add(cand)
            elif cand.status == CONFIRMED:
                self.reporter.submit(cand, None, self.frames)
        if self.vif is not None:
            self._drain(self.vif.step(self._tracks, self.frames, frame.index))
        self.reporter.on_frame(self.frames)
        self._prune(frame.index)
        self.frames_processed += 1
        self.last_frame = frame.index
        self.seconds += time.perf_counter() - t0
        return resolved

    def _drain(self, jobs: Iterable[VifJob]) -> None:
        for job in jobs:
            if self.collect_features:
                self.harvested.append((job.candidate, dict(job.features)))
            if job.candidate.status == CONFIRMED:
                verdicts = job.verdicts if self.cfg.mode == COLLISION_PLUS_VIF else None
                self.reporter.submit(job.candidate, verdicts, self.frames)

    def finish(self) -> dict:
        t0 = time.perf_counter()
        if self.vif is not None:
            self._drain(self.vif.step(self._tracks, self.frames, self.last_frame or 0, flush=True))
        report = self.reporter.close()
        self.seconds += time.perf_counter() - t0
        funnel = dict(self.estimator.counts)
        funnel["svm_suppressed"] = report["audit"]["suppressed"]
        funnel["duplicates"] = report["audit"]["duplicates"]
        funnel["incidents"] = report["audit"]["events"]
        return {
            "mode": self.cfg.mode,
            "frames_processed": self.frames_processed,
            "processing_seconds": self.seconds,
            "fps": self.frames_processed / self.seconds if self.seconds > 0 else None,
            "funnel": funnel,
            "mosse_calls": self.tracker.mosse_calls,
            "tracks_spawned": self.tracker.next_id,
            "descriptors_computed": self.vif.descriptors_computed if self.vif else 0,
            **report,
        }

    @property
    def events(self):
        return self.reporter.events


def run_stream(frames: Iterable[Frame], detections: Optional[Mapping[int, Sequence[Detection]]],
               cfg: PipelineConfig, model: Optional[SvmModel] = None, out_dir=None,
               trace: Optional[IO[str]] = None, collect_features: bool = False) -> Tuple[Pipeline, dict]:
    """Run a whole stream; ``detections=None`` means no detector feed (tracking only)."""
    pipe = Pipeline(cfg, model, out_dir, trace, collect_features)
    for frame in frames:
        dets = None if detections is None else detections.get(frame.index, [])
        pipe.process(frame, dets)
    summary = pipe.finish()
    if out_dir is not None:
        from pathlib import Path

        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return pipe, summary
