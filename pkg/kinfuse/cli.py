"""
Command-line front end: ``kinfuse {simulate,calibrate,track,fuse,eval,roundtrip}``.

Every command reads and writes the recording, motion, calibration and report formats only,
so a roundtrip equals the composition of the individual commands on the same seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

from . import config, constants
from .calibration import (
    build_calibration_input,
    calibrate,
    dump_calibration,
    load_calibration,
)
from .errors import InvalidConfigError, KinfuseError
from .guidance import METHODS, GuidanceWeights, fuse
from .metrics import Clip, EvalReport, build_report
from .motions import MotionKind, generate_motion
from .recording import read_motion, read_recording, write_motion, write_recording
from .simulate import SimConfig, simulate_sensors
from .skeleton import SkeletonModel, default_skeleton, load_skeleton
from .tracking import track_recording, write_tracked

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

console = Console()

RECORDING_FILE = "recording.kfr"
TRUTH_FILE = "truth.kfm"
CALIBRATION_FILE = "calibration.yaml"
TRACKED_FILE = "tracked.kft"
PRED_FILE = "pred.kfm"
REPORT_FILE = "report.csv"
SUMMARY_FILE = "report.txt"

CLIPS: Tuple[str, ...] = ("walk-cycle", "squat", "arm-wave")


def _window(value: Any) -> Tuple[int, int] | None:
    if value is None:
        return None

    if isinstance(value, str):
        (start, sep, end) = value.partition(":")
        if not sep:
            raise ValueError(f"expected START:END, got {value!r}")
        value = (start, end)

    (start, end) = (int(v) for v in value)
    if end < start:
        raise ValueError(f"window ends before it starts: {start}:{end}")
    return (start, end)


def _clips(value: Any) -> Tuple[str, ...]:
    if isinstance(value, str):
        value = value.split(",")
    return tuple(MotionKind.parse(v.strip()).value for v in value if v.strip())


@dataclass(frozen=True)
class PipelineConfig:
    """
    Settings shared by every command. ``seed`` overrides ``sim.seed``; window times are
    absolute recording milliseconds.
    """

    seed: int = 0
    out: str = "out"
    motion: str = "walk-cycle"
    duration: float = 30.0
    clips: Tuple[str, ...] = CLIPS
    dataset: str = "sim"
    max_gap: int = constants.MAX_GAP_MS
    window: Tuple[int, int] | None = None
    trim: bool = False
    yaw_only: bool = True
    workers: int = 1
    method: str = "optimize"
    size: int = constants.WINDOW
    overlap: int = constants.OVERLAP
    max_iterations: int = constants.MAX_ITERATIONS
    skeleton: str | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)

    def __post_init__(self) -> None:
        def check(condition: bool, message: str) -> None:
            if not condition:
                raise InvalidConfigError(message)

        check(isinstance(self.seed, int) and self.seed >= 0, "seed must be >= 0")
        check(self.duration > 0, "duration must be positive")
        check(self.max_gap >= 0, "max_gap must be >= 0")
        check(self.workers >= 1, "workers must be >= 1")
        check(self.method in METHODS, f"method must be one of {METHODS}")
        check(self.size >= 2 and 0 <= self.overlap < self.size, "bad window size/overlap")
        check(self.max_iterations >= 1, "max_iterations must be >= 1")
        check(len(self.clips) > 0, "at least one clip is required")
        MotionKind.parse(self.motion)

    def sim_config(self) -> SimConfig:
        return dataclasses.replace(self.sim, seed=self.seed)

    def load_skeleton(self) -> SkeletonModel:
        return default_skeleton() if self.skeleton is None else load_skeleton(self.skeleton)

    def replace(self, **changes: Any) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {"version": constants.CONFIG_VERSION, **config.to_dict(self)}

    def digest(self) -> str:
        "Hash of the settings that shape the outputs; the output directory is left out."

        document = self.to_dict()
        del document["out"]
        return config.config_hash(document)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> PipelineConfig:
        converters = {
            "seed": int,
            "duration": float,
            "max_gap": int,
            "workers": int,
            "size": int,
            "overlap": int,
            "max_iterations": int,
            "window": _window,
            "clips": _clips,
            "sim": lambda v: SimConfig.from_dict(dict(v)),
            "weights": lambda v: GuidanceWeights.from_dict(dict(v)),
        }
        return config.from_dict(cls, document, converters)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    return PipelineConfig.from_dict(config.load_document(path, constants.CONFIG_VERSION))


def dump_pipeline_config(cfg: PipelineConfig, path: str | Path) -> None:
    config.dump_document(cfg.to_dict(), path)


def _output(cfg: PipelineConfig, name: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def cmd_simulate(cfg: PipelineConfig) -> Tuple[Path, Path]:
    "Simulates ``cfg.motion`` and writes the recording and the ground-truth motion."

    sim = cfg.sim_config()
    motion = generate_motion(
        cfg.motion, cfg.duration, cfg.load_skeleton(), rate=sim.imu_rate
    )
    bundle = simulate_sensors(motion, sim)

    (recording, truth) = (_output(cfg, RECORDING_FILE), _output(cfg, TRUTH_FILE))
    write_recording(bundle.to_recording(), recording)
    write_motion(bundle.motion, truth, cfg.digest())

    logger.info("Simulated %s into %s", cfg.motion, cfg.out)
    return (recording, truth)


def cmd_calibrate(recording: str | Path, cfg: PipelineConfig) -> Path:
    """
    Calibrates every tracker over ``cfg.window``, or the recording's calibration markers.

    Raises
    ------

    MissingMarkerError when no window is given and the recording has no calibration markers.
    """

    data = read_recording(recording)
    calibration_input = build_calibration_input(data, cfg.window, cfg.max_gap)
    result = calibrate(
        calibration_input, trim=cfg.trim, yaw_only=cfg.yaw_only, workers=cfg.workers
    )

    for (name, reason) in result.failed().items():
        logger.warning("Tracker %s failed to calibrate: %s", name, reason)

    path = _output(cfg, CALIBRATION_FILE)
    dump_calibration(result, path)
    return path


def cmd_track(recording: str | Path, calibration: str | Path, cfg: PipelineConfig) -> Path:
    "Writes the calibrated bone orientations on the SLAM clock."

    skeleton = cfg.load_skeleton()
    (tracked, heading) = track_recording(
        read_recording(recording), load_calibration(calibration), skeleton, cfg.max_gap
    )

    path = _output(cfg, TRACKED_FILE)
    write_tracked(tracked, path, {"heading": config.plain(heading.quat)})
    return path


def cmd_fuse(recording: str | Path, calibration: str | Path, cfg: PipelineConfig) -> Path:
    "Writes the fused full-body motion."

    fusion = fuse(
        read_recording(recording),
        load_calibration(calibration),
        cfg.load_skeleton(),
        cfg.weights,
        method=cfg.method,
        max_gap=cfg.max_gap,
        size=cfg.size,
        overlap=cfg.overlap,
        max_iterations=cfg.max_iterations,
    )

    if not all(d.converged for d in fusion.diagnostics):
        logger.warning("Some optimization windows stalled short of the step tolerance.")

    path = _output(cfg, PRED_FILE)
    write_motion(fusion.motion, path, cfg.digest())
    return path


def _clip_name(path: Path) -> str:
    return path.parent.name or path.stem


def cmd_eval(
    pairs: Sequence[Tuple[str | Path, str | Path]], cfg: PipelineConfig
) -> EvalReport:
    "Evaluates (pred, truth) motion pairs and writes the report table and summary."

    skeleton = cfg.load_skeleton()
    clips = []
    for (pred, truth) in pairs:
        (pred, truth) = (Path(pred), Path(truth))
        clips.append(
            Clip(
                _clip_name(pred),
                read_motion(pred, skeleton),
                read_motion(truth, skeleton),
                cfg.dataset,
            )
        )

    report = build_report(clips, max_gap=cfg.max_gap)
    report.write(_output(cfg, REPORT_FILE))
    _output(cfg, SUMMARY_FILE).write_text(report.render())
    return report


def cmd_roundtrip(cfg: PipelineConfig) -> EvalReport:
    """
    Simulates, calibrates, tracks, fuses and evaluates every clip of ``cfg.clips``.

    Each clip's artifacts go to ``<out>/<clip>/``; the report covers all clips.
    """

    pairs = []
    for clip in cfg.clips:
        clip_cfg = cfg.replace(motion=clip, out=str(Path(cfg.out) / clip))

        (recording, truth) = cmd_simulate(clip_cfg)
        calibration = cmd_calibrate(recording, clip_cfg)
        cmd_track(recording, calibration, clip_cfg)
        pred = cmd_fuse(recording, calibration, clip_cfg)
        pairs.append((pred, truth))

    return cmd_eval(pairs, cfg)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="Pipeline config YAML.")
    parser.add_argument("--seed", type=int, default=None, help="Run seed.")
    parser.add_argument("--out", type=str, default=None, help="Output directory.")
    parser.add_argument("--max-gap", type=int, default=None, help="Sync gap in ms.")
    parser.add_argument("--weights", type=str, default=None, help="Weights k=v,...")
    parser.add_argument("--skeleton", type=str, default=None, help="Skeleton YAML.")
    parser.add_argument("--verbose", action="store_true", help="Debug logging.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinfuse", description="IMU and camera fusion for full-body motion capture."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Simulate a capture session.")
    simulate.add_argument("--motion", type=str, default=None, help="Motion kind.")
    simulate.add_argument("--duration", type=float, default=None, help="Seconds.")

    calibrate = commands.add_parser("calibrate", help="Calibrate trackers.")
    calibrate.add_argument("--recording", type=str, required=True)
    calibrate.add_argument("--window", type=str, default=None, help="START:END in ms.")
    calibrate.add_argument("--trim", action="store_true", default=None)
    calibrate.add_argument("--workers", type=int, default=None)

    track = commands.add_parser("track", help="Write tracked bone orientations.")
    track.add_argument("--recording", type=str, required=True)
    track.add_argument("--calibration", type=str, required=True)

    fuse_ = commands.add_parser("fuse", help="Estimate full-body motion.")
    fuse_.add_argument("--recording", type=str, required=True)
    fuse_.add_argument("--calibration", type=str, required=True)
    fuse_.add_argument("--method", type=str, choices=METHODS, default=None)

    evaluate = commands.add_parser("eval", help="Evaluate predictions against truth.")
    evaluate.add_argument("--pred", type=str, action="append", required=True)
    evaluate.add_argument("--truth", type=str, action="append", required=True)

    roundtrip = commands.add_parser("roundtrip", help="Run the whole pipeline.")
    roundtrip.add_argument("--clips", type=str, default=None, help="Motion kinds, a,b,c.")
    roundtrip.add_argument("--duration", type=float, default=None, help="Seconds.")
    roundtrip.add_argument("--method", type=str, choices=METHODS, default=None)

    for sub in (simulate, calibrate, track, fuse_, evaluate, roundtrip):
        _common(sub)

    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    "The config file (or defaults) with command-line flags applied on top."

    cfg = PipelineConfig() if args.config is None else load_pipeline_config(args.config)

    changes: Dict[str, Any] = {}
    for name in ("seed", "out", "max_gap", "skeleton", "motion", "duration", "method"):
        if (value := getattr(args, name, None)) is not None:
            changes[name] = value

    if getattr(args, "trim", None):
        changes["trim"] = True
    if (workers := getattr(args, "workers", None)) is not None:
        changes["workers"] = workers

    try:
        if (window := getattr(args, "window", None)) is not None:
            changes["window"] = _window(window)
        if (clips := getattr(args, "clips", None)) is not None:
            changes["clips"] = _clips(clips)
    except ValueError as e:
        raise InvalidConfigError(str(e)) from e

    if args.weights is not None:
        changes["weights"] = cfg.weights.updated(args.weights)

    return cfg.replace(**changes)


def _print_report(report: EvalReport) -> None:
    console.print(report.summary())
    overall = report.overall
    console.print(
        f"MPJPE {overall['mpjpe_cm']:.4f} cm, JAE {overall['jae_deg']:.4f} deg,"
        f" recall {overall['recall']:.4f}"
    )


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)

    if args.command == "simulate":
        (recording, truth) = cmd_simulate(cfg)
        console.print(f"Wrote {recording} and {truth}")
    elif args.command == "calibrate":
        console.print(f"Wrote {cmd_calibrate(args.recording, cfg)}")
    elif args.command == "track":
        console.print(f"Wrote {cmd_track(args.recording, args.calibration, cfg)}")
    elif args.command == "fuse":
        console.print(f"Wrote {cmd_fuse(args.recording, args.calibration, cfg)}")
    elif args.command == "eval":
        if len(args.pred) != len(args.truth):
            raise InvalidConfigError("--pred and --truth must pair up")
        _print_report(cmd_eval(list(zip(args.pred, args.truth)), cfg))
    else:
        _print_report(cmd_roundtrip(cfg))


def main(argv: List[str] | None = None) -> int:
    """
    Runs one command.

    Returns
    -------

    0 on success, otherwise the exit code of the raised error family
    (2 config, 3 data, 4 convergence).
    """

    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING
    logging.getLogger("kinfuse").setLevel(level)

    try:
        run(args)
    except KinfuseError as e:
        console.print(f"[red]error[/red] {escape(str(e))}")
        return e.exit_code

    return 0
