"""
On-body calibration from a short video segment.

Each tracker ``i`` carries an IMU (sensor frame ``S_i``, reporting in its own gravity-aligned
world ``W_i``) and a rigidly attached tag ``T_i`` with known ``T_i R_S_i``. The camera
``C`` sees the tag and an estimate of the bone frame ``B_i``. Per frame::

    B_i R_S_i   = (C R_B_i)^T  C R_T_i  T_i R_S_i
    C R_W_i     = C R_T_i  (W_i R_S_i  S_i R_T_i)^T

Both are averaged on SO(3); the heading of every IMU world is then expressed in the pelvis
tracker's world ``W_p``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
from numpy import ndarray
from rich.logging import RichHandler

from . import config, constants, so3
from .errors import (
    InvalidConfigError,
    MissingMarkerError,
    PelvisAnchorError,
    SchemaError,
    TooFewSamplesError,
)
from .recording import Recording
from .so3 import KarcherResult, Rotation, qconj, qmul
from .sync import synchronize

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())


class Triple(NamedTuple):
    "Synchronized observations of one tracker at one camera frame."

    timestamp: int
    tag: Rotation
    bone: Rotation | None
    imu: Rotation


class TrackerInput(NamedTuple):
    name: str
    triples: Tuple[Triple, ...]
    tag_to_sensor: Rotation

    def with_bone(self) -> Tuple[Triple, ...]:
        return tuple(t for t in self.triples if t.bone is not None)


@dataclass(frozen=True)
class CalibrationInput:
    """
    Per-tracker observations over the calibration window.

    ``gravity`` is the up direction in the camera frame when the capture device knows it.
    """

    trackers: Dict[str, TrackerInput]
    gravity: ndarray | None = None
    pelvis: str = constants.PELVIS

    def __getitem__(self, name: str) -> TrackerInput:
        if (tracker := self.trackers.get(name)) is None:
            raise TooFewSamplesError(name, 0, constants.N_MIN)

        return tracker


def calibration_window(recording: Recording) -> Tuple[int, int]:
    "The calibration segment bounds stored in the recording markers."

    for marker in (constants.CALIBRATION_START, constants.CALIBRATION_END):
        if marker not in recording.markers:
            raise MissingMarkerError(marker)

    return (
        recording.markers[constants.CALIBRATION_START],
        recording.markers[constants.CALIBRATION_END],
    )


def _tag_to_sensor(recording: Recording) -> Dict[str, Rotation]:
    table = recording.metadata.get("tag_to_sensor")

    if not isinstance(table, dict):
        raise SchemaError("recording metadata has no tag_to_sensor table")

    try:
        return {str(k): Rotation(v) for (k, v) in table.items()}
    except (TypeError, ValueError) as e:
        raise SchemaError(f"bad tag_to_sensor entry: {e}") from e


def build_calibration_input(
    recording: Recording,
    window: Tuple[int, int] | None = None,
    max_gap: int = constants.MAX_GAP_MS,
) -> CalibrationInput:
    """
    Collects synchronized (tag, bone, IMU) observations per tracker.

    Tag detections inside ``window`` (default: the calibration markers) are the reference
    clock. The bone estimate must come from the same camera frame, within
    ``CAMERA_PAIR_GAP_MS``; the IMU reading must lie within ``max_gap`` ms. Frames without
    a bone estimate keep the tag and IMU, which is all the heading alignment needs.

    Raises
    ------

    MissingMarkerError when no window is given and the recording lacks a marker.
    """

    (start, end) = calibration_window(recording) if window is None else window
    tag_to_sensor = _tag_to_sensor(recording)

    trackers = {}
    for sid in sorted(recording.streams):
        (prefix, _, name) = sid.partition("/")
        if prefix != constants.IMU_PREFIX:
            continue

        if name not in tag_to_sensor:
            raise SchemaError(f"recording metadata has no tag_to_sensor for {name!r}")

        tag_id = f"{constants.TAG_PREFIX}/{name}"
        bone_id = f"{constants.BONE_PREFIX}/{name}"
        triples: List[Triple] = []

        tags = recording[tag_id].between(start, end) if tag_id in recording else None
        if tags is not None and len(tags):
            imu = synchronize([tags, recording[sid]], tag_id, max_gap)
            if bone_id in recording:
                bones = synchronize(
                    [tags, recording[bone_id]], tag_id, constants.CAMERA_PAIR_GAP_MS
                )
            else:
                bones = [None] * len(imu)

            for (frame, paired) in zip(imu, bones):
                if not frame.valid(sid):
                    continue

                bone = None if paired is None else paired.payload(bone_id)
                triples.append(
                    Triple(frame.timestamp, frame.payload(tag_id), bone, frame.payload(sid))
                )

        trackers[name] = TrackerInput(name, tuple(triples), tag_to_sensor[name])
        logger.debug("%s: %d calibration frames", name, len(triples))

    gravity = recording.metadata.get("camera_gravity")
    return CalibrationInput(
        trackers, None if gravity is None else np.asarray(gravity, dtype=float)
    )


def bone_to_sensor_samples(tracker: TrackerInput) -> ndarray:
    "Per-frame ``B R_S`` quaternions from the frames with a bone estimate."

    triples = tracker.with_bone()
    tags = so3.as_quaternions([t.tag for t in triples])
    bones = so3.as_quaternions([t.bone for t in triples])
    return so3.canonicalize(
        qmul(qmul(qconj(bones), tags), tracker.tag_to_sensor.quat[None])
    )


def camera_world_samples(tracker: TrackerInput) -> ndarray:
    "Per-frame ``C R_W`` quaternions of the tracker's IMU world."

    tags = so3.as_quaternions([t.tag for t in tracker.triples])
    imus = so3.as_quaternions([t.imu for t in tracker.triples])
    return so3.canonicalize(
        qmul(qmul(tags, tracker.tag_to_sensor.quat[None]), qconj(imus))
    )


def _mean(
    name: str, quaternions: ndarray, trim: bool, minimum: int
) -> KarcherResult:
    if len(quaternions) < minimum:
        raise TooFewSamplesError(name, len(quaternions), minimum)

    return so3.karcher_mean(so3.from_quaternions(quaternions), trim=trim)


def estimate_bone_to_sensor(
    input: CalibrationInput,
    tracker: str,
    *,
    trim: bool = False,
    minimum: int = constants.N_MIN,
) -> KarcherResult:
    """
    The barycenter of the per-frame bone-to-sensor estimates of ``tracker``.

    Raises
    ------

    TooFewSamplesError with fewer than ``minimum`` frames carrying a bone estimate,
    KarcherConvergenceError from the averaging.
    """

    samples = input[tracker]
    if not samples.with_bone():
        raise TooFewSamplesError(tracker, 0, minimum)

    return _mean(tracker, bone_to_sensor_samples(samples), trim, minimum)


def camera_world(
    input: CalibrationInput,
    tracker: str,
    *,
    trim: bool = False,
    minimum: int = constants.N_MIN,
) -> KarcherResult:
    samples = input[tracker]
    if not samples.triples:
        raise TooFewSamplesError(tracker, 0, minimum)

    return _mean(tracker, camera_world_samples(samples), trim, minimum)


class WorldAlignment(NamedTuple):
    rotation: Rotation
    yaw_ambiguous: bool
    result: KarcherResult


def _heading(pelvis: Rotation, world: Rotation, yaw_only: bool) -> Tuple[Rotation, bool]:
    relative = pelvis.inverse() @ world

    if not yaw_only:
        return (relative, False)

    if ambiguous := so3.yaw_ambiguous(relative):
        logger.warning("Heading of a tracker world is ambiguous under yaw projection.")

    return (so3.yaw_project(relative), ambiguous)


def estimate_world_alignment(
    input: CalibrationInput,
    tracker: str,
    pelvis: str | None = None,
    *,
    yaw_only: bool = True,
    trim: bool = False,
    minimum: int = constants.N_MIN,
) -> WorldAlignment:
    """
    Orientation of ``tracker``'s IMU world in the pelvis tracker's world.

    With ``yaw_only`` (default) the result is projected onto rotations about gravity, the
    only freedom two gravity-aligned worlds can differ by.

    Raises
    ------

    TooFewSamplesError when either tracker has fewer than ``minimum`` frames.
    """

    pelvis = input.pelvis if pelvis is None else pelvis
    anchor = camera_world(input, pelvis, trim=trim, minimum=minimum)
    own = camera_world(input, tracker, trim=trim, minimum=minimum)
    (rotation, ambiguous) = _heading(anchor.mean, own.mean, yaw_only)
    return WorldAlignment(rotation, ambiguous, own)


class TrackerDiagnostics(NamedTuple):
    samples: int
    spread: float
    trimmed: int
    iterations: int
    heading_samples: int
    heading_spread: float
    yaw_ambiguous: bool


@dataclass(frozen=True)
class TrackerCalibration:
    """
    Calibration of one tracker, or the reason it failed.

    ``heading`` is ``W_p R_W_i``; the pelvis tracker's heading is the identity.
    """

    name: str
    bone_to_sensor: Rotation | None
    heading: Rotation | None
    diagnostics: TrackerDiagnostics | None = None
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


@dataclass(frozen=True)
class CalibrationResult:
    trackers: Dict[str, TrackerCalibration]
    pelvis: str = constants.PELVIS
    gravity_error: float | None = None
    yaw_only: bool = True
    version: int = field(default=constants.CALIBRATION_VERSION)

    def __getitem__(self, name: str) -> TrackerCalibration:
        return self.trackers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.trackers

    def succeeded(self) -> List[str]:
        return [k for (k, v) in self.trackers.items() if v.ok]

    def failed(self) -> Dict[str, str]:
        return {k: v.failure for (k, v) in self.trackers.items() if v.failure}

    def to_dict(self) -> Dict[str, Any]:
        def quat(r: Rotation | None) -> List[float] | None:
            return None if r is None else list(r.quat)

        return config.plain(
            {
                "version": self.version,
                "pelvis": self.pelvis,
                "gravity_error": self.gravity_error,
                "yaw_only": self.yaw_only,
                "trackers": {
                    name: {
                        "bone_to_sensor": quat(t.bone_to_sensor),
                        "heading": quat(t.heading),
                        "failure": t.failure,
                        "diagnostics": (
                            None if t.diagnostics is None else t.diagnostics._asdict()
                        ),
                    }
                    for (name, t) in self.trackers.items()
                },
            }
        )

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> CalibrationResult:
        def quat(value: Any) -> Rotation | None:
            return None if value is None else Rotation(value)

        try:
            trackers = {}
            for (name, entry) in document["trackers"].items():
                diagnostics = entry.get("diagnostics")
                trackers[str(name)] = TrackerCalibration(
                    str(name),
                    quat(entry["bone_to_sensor"]),
                    quat(entry["heading"]),
                    None if diagnostics is None else TrackerDiagnostics(**diagnostics),
                    entry.get("failure"),
                )

            return cls(
                trackers,
                str(document.get("pelvis", constants.PELVIS)),
                document.get("gravity_error"),
                bool(document.get("yaw_only", True)),
                int(document["version"]),
            )
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise InvalidConfigError(f"malformed calibration document: {e!r}") from e


def _calibrate_tracker(
    input: CalibrationInput,
    name: str,
    anchor: Rotation,
    trim: bool,
    yaw_only: bool,
    minimum: int,
) -> TrackerCalibration:
    try:
        bone = estimate_bone_to_sensor(input, name, trim=trim, minimum=minimum)
        world = camera_world(input, name, trim=trim, minimum=minimum)
    except TooFewSamplesError as e:
        logger.warning("Calibration of %s failed: %s", name, e)
        return TrackerCalibration(name, None, None, None, str(e))

    (heading, ambiguous) = _heading(anchor, world.mean, yaw_only)
    diagnostics = TrackerDiagnostics(
        bone.diagnostics.samples,
        bone.diagnostics.max_residual,
        bone.diagnostics.trimmed,
        bone.diagnostics.iterations,
        world.diagnostics.samples,
        world.diagnostics.max_residual,
        ambiguous,
    )
    return TrackerCalibration(name, bone.mean, heading, diagnostics)


def gravity_error(anchor: Rotation, gravity: Sequence[float] | ndarray) -> float:
    "Angle (rad) between the pelvis world's up axis seen from the camera and ``gravity``."

    up = anchor.apply(constants.GRAVITY_AXIS)
    g = np.asarray(gravity, dtype=float)
    g = g / np.linalg.norm(g)
    return float(np.arctan2(np.linalg.norm(np.cross(up, g)), up @ g))


def calibrate(
    input: CalibrationInput,
    *,
    trim: bool = False,
    yaw_only: bool = True,
    workers: int = 1,
    minimum: int = constants.N_MIN,
) -> CalibrationResult:
    """
    Calibrates every tracker of ``input``.

    Trackers are independent once the pelvis world is known and may run on ``workers``
    threads. A tracker with too few frames is marked failed; the others still calibrate.

    Raises
    ------

    PelvisAnchorError when the pelvis tracker has too few frames, and
    KarcherConvergenceError when any rotation average fails to converge.
    """

    pelvis = input.pelvis
    try:
        anchor = camera_world(input, pelvis, trim=trim, minimum=minimum)
        estimate_bone_to_sensor(input, pelvis, trim=trim, minimum=minimum)
    except TooFewSamplesError as e:
        raise PelvisAnchorError(f"pelvis tracker cannot anchor the worlds: {e}") from e

    names = sorted(input.trackers)

    def run(name: str) -> TrackerCalibration:
        return _calibrate_tracker(input, name, anchor.mean, trim, yaw_only, minimum)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, names))
    else:
        results = [run(name) for name in names]

    error = None
    if input.gravity is not None:
        error = gravity_error(anchor.mean, input.gravity)
        logger.info("Camera gravity disagrees by %.3f deg", np.rad2deg(error))

    return CalibrationResult(
        {r.name: r for r in results}, pelvis, error, yaw_only
    )


def dump_calibration(result: CalibrationResult, path: str | Path) -> None:
    config.dump_document(result.to_dict(), path)


def load_calibration(path: str | Path) -> CalibrationResult:
    return CalibrationResult.from_dict(
        config.load_document(path, constants.CALIBRATION_VERSION)
    )
