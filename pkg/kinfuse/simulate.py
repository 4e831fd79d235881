"""
Sensor simulator: turns a ground-truth motion into IMU, tag, estimated-bone and SLAM streams.

Frames: ``Wg`` is the simulation world, which is also the SLAM world. Each IMU reports its
sensor frame ``S_i`` in its own gravity-aligned world ``W_i``, a yaw away from the pelvis
tracker's world ``W_p``, itself a yaw away from ``Wg``. The phone camera ``C`` sees the tags
``T_i`` rigidly attached to the sensors and the bone frames ``B_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Tuple

import numpy as np
from numpy import ndarray
from rich.logging import RichHandler

from . import config, constants, so3
from .codec import transmit
from .errors import InvalidConfigError
from .interfaces import HeadPose, Stream
from .recording import Recording
from .skeleton import (
    MotionSequence,
    bone_quaternions,
    world_positions,
    world_quaternions,
)
from .so3 import Rotation, qconj, qmul

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

# Phone camera facing the subject from +X, image Y pointing down.
_CAMERA = Rotation.from_matrix(
    np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
)

_Z = np.array([0.0, 0.0, 1.0])


def _quaternion(value: Any) -> Tuple[float, ...]:
    q = tuple(float(x) for x in value)
    if len(q) != 4:
        raise ValueError(f"expected 4 quaternion components, got {len(q)}")
    return q


def _quaternion_table(value: Any) -> Dict[str, Tuple[float, ...]]:
    return {str(k): _quaternion(v) for (k, v) in dict(value).items()}


def _float_table(value: Any) -> Dict[str, float]:
    return {str(k): float(v) for (k, v) in dict(value).items()}


@dataclass(frozen=True)
class SimConfig:
    """
    Simulation settings. Angles in radians, rates in Hz, times in seconds unless noted.

    Ground-truth calibration values not given explicitly are drawn from the seed:
    ``bone_to_sensor`` and ``tag_to_sensor`` uniformly over SO(3), ``heading_offsets``
    (yaw of ``W_i`` in ``W_p``) and ``world_heading`` (yaw of ``W_p`` in the world)
    uniformly over the circle. The pelvis heading offset is always zero.

    With ``wire`` set, IMU readings pass through the tracker packet codec and arrive
    Q15-quantized.
    """

    seed: int = 0
    imu_rate: float = constants.IMU_RATE_HZ
    camera_rate: float = constants.CAMERA_RATE_HZ
    imu_noise: float = float(np.deg2rad(0.5))
    heading_drift: float = float(np.deg2rad(0.05))
    drift_overrides: Dict[str, float] = field(default_factory=dict)
    tag_noise: float = float(np.deg2rad(1.0))
    tag_dropout: float = 0.05
    dropout_overrides: Dict[str, float] = field(default_factory=dict)
    bone_noise: float = float(np.deg2rad(2.0))
    bone_recall: float = 1.0
    camera_jitter: float = 0.0
    slam_drift: float = 0.001
    clock_offsets: Dict[str, int] = field(default_factory=dict)
    calibration_duration: float = 5.0
    camera_orientation: Tuple[float, ...] = tuple(_CAMERA.quaternion())
    world_heading: float | None = None
    heading_offsets: Dict[str, float] = field(default_factory=dict)
    bone_to_sensor: Dict[str, Tuple[float, ...]] = field(default_factory=dict)
    tag_to_sensor: Dict[str, Tuple[float, ...]] = field(default_factory=dict)
    wire: bool = False

    def validate(self) -> None:
        def check(condition: bool, message: str) -> None:
            if not condition:
                raise InvalidConfigError(message)

        check(isinstance(self.seed, int) and self.seed >= 0, "seed must be >= 0")
        check(self.imu_rate > 0 and self.camera_rate > 0, "rates must be positive")

        for name in ("imu_noise", "tag_noise", "bone_noise", "camera_jitter"):
            check(getattr(self, name) >= 0, f"{name} must be >= 0")

        for p in (self.tag_dropout, self.bone_recall, *self.dropout_overrides.values()):
            check(0.0 <= p <= 1.0, f"probability {p} outside [0, 1]")

        for (device, offset) in self.clock_offsets.items():
            check(abs(offset) <= 100, f"clock offset of {device!r} exceeds 100 ms")

        check(self.calibration_duration > 0, "calibration_duration must be positive")

    @classmethod
    def noiseless(cls, **changes: Any) -> SimConfig:
        "A configuration with every noise, drift, dropout and clock offset zero."

        quiet: Dict[str, Any] = {
            "imu_noise": 0.0,
            "heading_drift": 0.0,
            "tag_noise": 0.0,
            "tag_dropout": 0.0,
            "bone_noise": 0.0,
            "slam_drift": 0.0,
        }
        quiet.update(changes)
        return cls(**quiet)

    def drift(self, tracker: str) -> float:
        return self.drift_overrides.get(tracker, self.heading_drift)

    def dropout(self, tracker: str) -> float:
        return self.dropout_overrides.get(tracker, self.tag_dropout)

    def offset(self, device: str) -> int:
        "Clock offset (ms) of ``device``; ``imu/<name>`` falls back to ``imu``."

        if device in self.clock_offsets:
            return int(self.clock_offsets[device])

        return int(self.clock_offsets.get(device.split("/")[0], 0))

    def to_dict(self) -> Dict[str, Any]:
        return {"version": constants.CONFIG_VERSION, **config.to_dict(self)}

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> SimConfig:
        converters = {
            "seed": int,
            "drift_overrides": _float_table,
            "dropout_overrides": _float_table,
            "clock_offsets": lambda v: {str(k): int(x) for (k, x) in dict(v).items()},
            "camera_orientation": _quaternion,
            "heading_offsets": _float_table,
            "bone_to_sensor": _quaternion_table,
            "tag_to_sensor": _quaternion_table,
        }
        cfg = config.from_dict(cls, document, converters)
        cfg.validate()
        return cfg


def load_sim_config(path: str) -> SimConfig:
    return SimConfig.from_dict(config.load_document(path, constants.CONFIG_VERSION))


def dump_sim_config(cfg: SimConfig, path: str) -> None:
    config.dump_document(cfg.to_dict(), path)


@dataclass(frozen=True)
class GroundTruth:
    "The calibration a perfect estimator would recover."

    bone_to_sensor: Dict[str, Rotation]
    tag_to_sensor: Dict[str, Rotation]
    heading: Dict[str, Rotation]
    world: Rotation
    camera: Rotation

    def sensor_world(self, tracker: str) -> Rotation:
        "Orientation of ``W_i`` in the simulation world."

        return self.world @ self.heading[tracker]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bone_to_sensor": {k: list(v.quat) for (k, v) in self.bone_to_sensor.items()},
            "tag_to_sensor": {k: list(v.quat) for (k, v) in self.tag_to_sensor.items()},
            "heading": {k: list(v.quat) for (k, v) in self.heading.items()},
            "world": list(self.world.quat),
            "camera": list(self.camera.quat),
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> GroundTruth:
        def table(key: str) -> Dict[str, Rotation]:
            return {k: Rotation(v) for (k, v) in document[key].items()}

        return cls(
            table("bone_to_sensor"),
            table("tag_to_sensor"),
            table("heading"),
            Rotation(document["world"]),
            Rotation(document["camera"]),
        )


def draw_truth(cfg: SimConfig, trackers: Tuple[str, ...]) -> GroundTruth:
    rng = config.stage_rng(cfg.seed, "calibration")

    bone_to_sensor = {}
    tag_to_sensor = {}
    heading = {}

    for name in trackers:
        drawn = (Rotation.random(rng), Rotation.random(rng), rng.uniform(-np.pi, np.pi))

        if name in cfg.bone_to_sensor:
            bone_to_sensor[name] = Rotation(cfg.bone_to_sensor[name])
        else:
            bone_to_sensor[name] = drawn[0]

        if name in cfg.tag_to_sensor:
            tag_to_sensor[name] = Rotation(cfg.tag_to_sensor[name])
        else:
            tag_to_sensor[name] = drawn[1]

        yaw = cfg.heading_offsets.get(name, drawn[2])
        heading[name] = Rotation.about_axis(_Z, 0.0 if name == constants.PELVIS else yaw)

    drawn_world = rng.uniform(-np.pi, np.pi)
    world_yaw = drawn_world if cfg.world_heading is None else cfg.world_heading

    return GroundTruth(
        bone_to_sensor,
        tag_to_sensor,
        heading,
        Rotation.about_axis(_Z, world_yaw),
        Rotation(cfg.camera_orientation),
    )


def stream_id(prefix: str, tracker: str) -> str:
    return f"{prefix}/{tracker}"


@dataclass(frozen=True, eq=False)
class SimBundle:
    motion: MotionSequence
    imu: Dict[str, Stream[Rotation]]
    tags: Dict[str, Stream[Rotation]]
    bones: Dict[str, Stream[Rotation]]
    slam: Stream[HeadPose]
    markers: Dict[str, int]
    truth: GroundTruth
    config: SimConfig

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, SimBundle):
            return NotImplemented

        return (
            self.motion == other.motion
            and self.streams() == other.streams()
            and self.markers == other.markers
            and self.truth.to_dict() == other.truth.to_dict()
            and self.config == other.config
        )

    __hash__ = None  # type: ignore

    def streams(self) -> Dict[str, Stream]:
        streams: Dict[str, Stream] = {}
        for group in (self.imu, self.tags, self.bones):
            streams.update({s.id: s for s in group.values()})
        streams[self.slam.id] = self.slam
        return streams

    def camera_gravity(self) -> ndarray:
        "Gravity direction (up) in the nominal camera frame."

        return self.truth.camera.inverse().apply(_Z)

    def to_recording(self) -> Recording:
        metadata = {
            "tag_to_sensor": {
                k: list(v.quat) for (k, v) in self.truth.tag_to_sensor.items()
            },
            "camera_gravity": list(self.camera_gravity()),
            "config": self.config.to_dict(),
            "ground_truth": self.truth.to_dict(),
        }
        return Recording(
            self.streams(),
            self.markers,
            config.plain(metadata),
            self.motion.skeleton.version,
            config.config_hash(self.config.to_dict()),
        )

    @classmethod
    def from_recording(cls, recording: Recording, motion: MotionSequence) -> SimBundle:
        def group(prefix: str) -> Dict[str, Stream]:
            return {
                s.id.split("/", 1)[1]: s
                for s in recording.streams.values()
                if s.id.startswith(prefix + "/")
            }

        return cls(
            motion,
            group(constants.IMU_PREFIX),
            group(constants.TAG_PREFIX),
            group(constants.BONE_PREFIX),
            recording[constants.SLAM_STREAM],
            dict(recording.markers),
            GroundTruth.from_dict(recording.metadata["ground_truth"]),
            SimConfig.from_dict(recording.metadata["config"]),
        )


def perturb(quaternions: ndarray, sigma: float, rng: np.random.Generator) -> ndarray:
    "Right-multiplies each rotation by ``exp`` of an isotropic ``N(0, sigma^2 I)`` vector."

    if sigma == 0:
        return quaternions

    noise = rng.normal(0.0, sigma, size=quaternions.shape[:-1] + (3,))
    return qmul(quaternions, so3.exp_quaternions(noise))


def _yaw(angles: ndarray) -> ndarray:
    half = angles[:, None] / 2.0
    return np.concatenate([np.cos(half), np.sin(half) * _Z], axis=-1)


def camera_ticks(timestamps: ndarray, rate: float) -> ndarray:
    "Indices of the motion frames nearest to each nominal camera time."

    if len(timestamps) < 2:
        return np.zeros(len(timestamps), dtype=np.int64)

    relative = timestamps - timestamps[0]
    nominal = np.arange(0.0, relative[-1] + 1e-9, 1000.0 / rate)
    after = np.clip(np.searchsorted(relative, nominal), 1, len(relative) - 1)
    before = after - 1
    nearer = np.where(
        nominal - relative[before] <= relative[after] - nominal, before, after
    )
    return np.unique(nearer)


def _stream(prefix: str, name: str, stamps: ndarray, quats: ndarray) -> Stream[Rotation]:
    sid = stream_id(prefix, name) if name else prefix
    return Stream.of(sid, "rotation", stamps, so3.from_quaternions(quats))


def simulate_sensors(motion: MotionSequence, cfg: SimConfig) -> SimBundle:
    """
    Emits every sensor stream a capture session would record for ``motion``.

    IMU readings follow ``W_i R_S_i = (Wg R_W_i)^T Wg R_B_i B_i R_S_i``, with a linear yaw
    drift left-multiplied in ``W_i`` and tangent noise right-multiplied. Tag and bone
    detections are the camera-frame orientations of ``T_i`` and ``B_i`` on the camera
    ticks. The SLAM stream is the head joint's world pose plus a translation drift along X.
    With :meth:`SimConfig.noiseless` the streams are exact.
    """

    cfg.validate()
    skeleton = motion.skeleton
    trackers = skeleton.tracked
    truth = draw_truth(cfg, trackers)

    world = world_quaternions(skeleton, motion.root_orientations, motion.joint_rotations)
    joints = world_positions(skeleton, world, motion.root_positions)
    bones = bone_quaternions(skeleton, world, trackers)

    elapsed = (motion.timestamps - motion.timestamps[0]) / 1000.0
    ticks = camera_ticks(motion.timestamps, cfg.camera_rate)

    imu = {}
    for (index, name) in enumerate(trackers):
        sensor_world = truth.sensor_world(name).quat
        reading = qmul(
            qmul(qconj(sensor_world)[None], bones[:, index]),
            truth.bone_to_sensor[name].quat[None],
        )

        if (rate := cfg.drift(name)) != 0:
            reading = qmul(_yaw(rate * elapsed), reading)

        reading = perturb(reading, cfg.imu_noise, config.stage_rng(cfg.seed, "imu", index))
        stamps = motion.timestamps + cfg.offset(stream_id(constants.IMU_PREFIX, name))
        imu[name] = _stream(constants.IMU_PREFIX, name, stamps, reading)

        if cfg.wire:
            imu[name] = transmit(imu[name], index)

    camera = np.broadcast_to(truth.camera.quat, (len(ticks), 4))
    camera = perturb(camera, cfg.camera_jitter, config.stage_rng(cfg.seed, "camera"))
    camera_stamps = motion.timestamps[ticks] + cfg.offset("camera")

    recall_rng = config.stage_rng(cfg.seed, "bones", len(trackers))
    detected = recall_rng.uniform(size=len(ticks)) < cfg.bone_recall

    tags = {}
    detections = {}
    for (index, name) in enumerate(trackers):
        in_camera = qmul(qconj(camera), bones[ticks, index])
        tag = qmul(
            qmul(in_camera, truth.bone_to_sensor[name].quat[None]),
            qconj(truth.tag_to_sensor[name].quat)[None],
        )
        tag_rng = config.stage_rng(cfg.seed, "tags", index)
        visible = tag_rng.uniform(size=len(ticks)) >= cfg.dropout(name)
        tag = perturb(tag, cfg.tag_noise, tag_rng)
        tags[name] = _stream(
            constants.TAG_PREFIX, name, camera_stamps[visible], tag[visible]
        )

        bone_rng = config.stage_rng(cfg.seed, "bones", index)
        observed = perturb(in_camera, cfg.bone_noise, bone_rng)
        detections[name] = _stream(
            constants.BONE_PREFIX, name, camera_stamps[detected], observed[detected]
        )

    head = skeleton.joint_index("head")
    drift = cfg.slam_drift * elapsed[ticks, None] * np.array([1.0, 0.0, 0.0])
    head_positions = joints[ticks, head] + drift
    slam = Stream.of(
        constants.SLAM_STREAM,
        "head_pose",
        motion.timestamps[ticks] + cfg.offset(constants.SLAM_STREAM),
        [
            HeadPose(Rotation(q), p)
            for (q, p) in zip(world[ticks, head], head_positions)
        ],
    )

    start = int(motion.timestamps[0])
    markers = {
        constants.CALIBRATION_START: start,
        constants.CALIBRATION_END: start + int(round(cfg.calibration_duration * 1000)),
    }

    logger.debug(
        "Simulated %d IMU samples and %d camera frames per tracker",
        len(motion),
        len(ticks),
    )
    return SimBundle(
        motion.replace(markers=markers),
        imu,
        tags,
        detections,
        slam,
        markers,
        truth,
        cfg,
    )


def truth_bones(motion: MotionSequence, names: Tuple[str, ...] | None = None) -> ndarray:
    "``(F, B, 4)`` ground-truth world orientations of the tracked bones."

    skeleton = motion.skeleton
    world = world_quaternions(skeleton, motion.root_orientations, motion.joint_rotations)
    return bone_quaternions(skeleton, world, names or skeleton.tracked)
