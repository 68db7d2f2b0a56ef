"""Command line entry point: ``crashdet {run,simulate,train-svm,evaluate,benchmark,calibrate}``.

Exit codes: 0 success, 1 validation error (config, inputs, model file),
2 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import PipelineConfig, dump_config, load_config
from .errors import ConfigError, CrashDetError, DetectionFormatError, FrameSourceError, ModelFormatError
from .reporter import COLLISION_PLUS_VIF, MODES

log = logging.getLogger("crashdet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _emit(report: dict, out: Optional[str]) -> None:
    text = json.dumps(report, indent=1, sort_keys=True, default=str)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    cfg = copy.deepcopy(cfg)
    for attr in ("frames", "detections", "out"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "webhook", None):
        cfg.reporter.webhook = args.webhook
    if getattr(args, "model", None):
        cfg.svm.model = args.model
    return cfg


def _validate_run(cfg: PipelineConfig) -> List[str]:
    errors = []
    if not cfg.frames:
        errors.append("frames: no input given (--frames or [pipeline] frames)")
    elif not Path(cfg.frames).exists():
        errors.append(f"frames: {cfg.frames} does not exist")
    if cfg.detections and not Path(cfg.detections).is_file():
        errors.append(f"detections: {cfg.detections} is not a file")
    if not cfg.out:
        errors.append("out: no output directory given (--out or [pipeline] out)")
    errors.extend(_validate_mode(cfg))
    return errors


def _validate_mode(cfg: PipelineConfig) -> List[str]:
    if cfg.mode == COLLISION_PLUS_VIF:
        if not cfg.svm.model:
            return [f"[svm] model: required when mode = {cfg.mode}"]
        if not Path(cfg.svm.model).is_file():
            return [f"[svm] model: {cfg.svm.model} is not a file"]
    return []


def _load_model(cfg: PipelineConfig):
    if cfg.mode != COLLISION_PLUS_VIF:
        return None
    from .svm import load_model

    return load_model(cfg.svm.model)


def cmd_run(args) -> int:
    from .ingest import open_frame_source, read_detections
    from .pipeline import run_stream

    cfg = _apply_overrides(load_config(args.config), args)
    errors = _validate_run(cfg)
    if errors:
        raise ConfigError(errors)
    model = _load_model(cfg)
    detections = read_detections(cfg.detections, cfg.resolution) if cfg.detections else None
    source = open_frame_source(cfg.frames, cfg.frame_source)
    trace = open(args.dump_trace, "w", encoding="utf-8") if args.dump_trace else None
    try:
        _, summary = run_stream(source, detections, cfg, model, cfg.out, trace)
    finally:
        if trace is not None:
            trace.close()
    _emit(summary, None)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .scenario import build_spec, generate, load_spec, suite, write_clip

    out = Path(args.out)
    if args.spec:
        specs = [("clip", load_spec(args.spec))]
    elif args.suite:
        all_specs = suite(args.suite, args.seed or 0)
        idx = args.index if args.index is not None else list(range(len(all_specs)))
        idx = idx if isinstance(idx, list) else [idx]
        specs = [(f"{args.suite}-{i:03d}", all_specs[i]) for i in idx]
    else:
        specs = [("clip", build_spec(args.kind, args.seed or 0, args.elevation, args.scale, args.vehicles))]
    written = []
    for name, spec in specs:
        frames, truth = generate(spec)
        target = out if len(specs) == 1 else out / name
        write_clip(target, spec, frames, truth)
        written.append({"dir": str(target), "kind": spec.kind, "crash": truth.crash_label,
                        "frames": len(frames)})
    _emit({"clips": written}, None)
    return EXIT_OK


def _clips(args):
    from .evaluation import clips_from_specs, load_clip
    from .scenario import suite

    if args.clips:
        return [load_clip(d) for d in args.clips]
    return clips_from_specs(suite(args.suite, args.suite_seed))


def cmd_train(args) -> int:
    from .evaluation import train_svm
    from .svm import save_model

    cfg = _apply_overrides(load_config(args.config), args)
    seed = cfg.seed
    model, report = train_svm(_clips(args), cfg, seed)
    save_model(model, args.out)
    report["model"] = str(args.out)
    _emit(report, args.report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    cfg = _apply_overrides(load_config(args.config), args)
    errors = _validate_mode(cfg)
    if errors:
        raise ConfigError(errors)
    model = _load_model(cfg)
    reports = evaluate(_clips(args), {cfg.mode: cfg}, {cfg.mode: model} if model else None)
    _emit(reports[cfg.mode], args.report)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .evaluation import benchmark

    cfg = _apply_overrides(load_config(args.config), args)
    counts = [int(v) for v in args.vehicle_counts.split(",")]
    _emit(benchmark(cfg, counts, args.duration, cfg.seed), args.report)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .evaluation import calibrate

    cfg = _apply_overrides(load_config(args.config), args)
    report = calibrate(_clips(args), cfg)
    if args.write_config:
        tuned = copy.deepcopy(cfg)
        tuned.collision.speed_limit = float(report["best"]["speed_limit"])
        tuned.tracker.min_speed = float(report["best"]["min_speed"])
        Path(args.write_config).write_text(dump_config(tuned))
    _emit(report, args.report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crashdet", description="Road-crash detection on camera streams.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, inputs=False):
        p.add_argument("--config", help="INI config file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override [pipeline] seed")
        p.add_argument("--mode", choices=MODES, help="override [pipeline] mode")
        p.add_argument("--model", help="override [svm] model")
        if inputs:
            p.add_argument("--clips", nargs="+", help="clip directories written by 'simulate'")
            p.add_argument("--suite", choices=("acceptance", "calibration"), default="calibration")
            p.add_argument("--suite-seed", type=int, default=0)
            p.add_argument("--report", help="also write the JSON report here")

    p = sub.add_parser("run", help="process one stream")
    common(p)
    p.add_argument("--frames", help="PGM directory or raw stream file")
    p.add_argument("--detections", help="detection JSONL feed")
    p.add_argument("--out", help="store directory for incidents.jsonl, clips/ and summary.json")
    p.add_argument("--webhook", help="POST incidents to this URL")
    p.add_argument("--dump-trace", help="write track and candidate trace JSON lines here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="render synthetic clips")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="scenario spec JSON file")
    p.add_argument("--suite", choices=("acceptance", "calibration"))
    p.add_argument("--index", type=int, help="suite member (all when omitted)")
    p.add_argument("--kind", default="head_on")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--elevation", type=float, default=45.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--vehicles", type=int, default=2)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-svm", help="harvest ViF features and train the classifier")
    common(p, inputs=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="clip-level accuracy / recall / false-alarm rate")
    common(p, inputs=True)
    p.set_defaults(func=cmd_evaluate, suite="acceptance")

    p = sub.add_parser("benchmark", help="throughput and TCFI filter-call counts")
    common(p)
    p.add_argument("--vehicle-counts", default="2,6,10,12")
    p.add_argument("--duration", type=int, default=150, help="frames per clip (150 = 5 s at 30 fps)")
    p.add_argument("--report")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("calibrate", help="grid-search speed_limit x min_speed for F1")
    common(p, inputs=True)
    p.add_argument("--write-config", help="write the tuned config here")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (DetectionFormatError, FrameSourceError, ModelFormatError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CrashDetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
