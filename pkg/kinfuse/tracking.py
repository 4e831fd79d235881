"""
Runtime tracking: calibrated bone orientations, root anchoring and the IMU-only pose.

A tracked bone orientation composes three rotations::

    W_p R_B_i(t) = W_p R_W_i  W_i R_S_i(t)  (B_i R_S_i)^T
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from numpy import ndarray
from rich.logging import RichHandler

from . import constants, so3
from .calibration import CalibrationResult
from .errors import EmptyStreamError, MissingCalibrationError, SchemaError
from .interfaces import AlignedFrame, HeadPose, Stream, TrackedSample
from .recording import Recording, read_recording, write_recording
from .skeleton import (
    MotionSequence,
    SkeletonModel,
    positions,
    world_positions,
    world_quaternions,
)
from .so3 import Rotation, qconj, qmul, qrot
from .sync import nearest_indices, synchronize

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _tracker_order(name: str) -> Tuple[int, str]:
    if name in constants.TRACKED_BONES:
        return (constants.TRACKED_BONES.index(name), name)

    return (len(constants.TRACKED_BONES), name)


def staleness_weights(
    staleness: ndarray,
    stale_after: float = constants.STALE_AFTER_MS,
    fade: float = constants.STALE_FADE_MS,
) -> ndarray:
    "1 up to ``stale_after`` ms, then linearly down to 0 over ``fade`` ms."

    excess = np.maximum(np.asarray(staleness, dtype=float) - stale_after, 0.0)
    return np.clip(1.0 - excess / fade, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class TrackedBones:
    """
    Per-frame world orientations of the tracked bones.

    ``quaternions`` is ``(F, T, 4)`` in tracker order ``names``; ``staleness`` is
    ``(F, T)``, the age in ms of the IMU reading behind each value.
    """

    timestamps: ndarray
    names: Tuple[str, ...]
    quaternions: ndarray
    staleness: ndarray

    def __post_init__(self) -> None:
        timestamps = np.asarray(self.timestamps, dtype=np.int64)
        frames = len(timestamps)
        names = tuple(self.names)
        quaternions = so3.canonicalize(
            np.asarray(self.quaternions, dtype=float).reshape(frames, len(names), 4)
        )
        staleness = np.asarray(self.staleness, dtype=float).reshape(frames, len(names))

        if np.any(np.diff(timestamps) < 0):
            raise ValueError("Tracked frames must be time-ordered.")

        if np.any(staleness < 0):
            raise ValueError("Staleness must be nonnegative.")

        for value in (timestamps, quaternions, staleness):
            value.setflags(write=False)

        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "quaternions", quaternions)
        object.__setattr__(self, "staleness", staleness)

    def __len__(self) -> int:
        return len(self.timestamps)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        if name not in self.names:
            raise MissingCalibrationError(name)

        return self.names.index(name)

    def bone(self, name: str) -> ndarray:
        return self.quaternions[:, self.index(name)]

    def weights(self) -> ndarray:
        return staleness_weights(self.staleness)

    def stale(self, threshold: float = constants.STALE_AFTER_MS) -> ndarray:
        return self.staleness > threshold

    def rotated(self, rotation: Rotation) -> TrackedBones:
        "Re-expresses every orientation in a world rotated by ``rotation``."

        quaternions = qmul(rotation.quat, self.quaternions)
        return TrackedBones(self.timestamps, self.names, quaternions, self.staleness)

    def select(self, indices: Sequence[int] | ndarray) -> TrackedBones:
        indices = np.asarray(indices, dtype=np.int64)
        return TrackedBones(
            self.timestamps[indices],
            self.names,
            self.quaternions[indices],
            self.staleness[indices],
        )


def track_bones(
    frames: Sequence[AlignedFrame], calibration: CalibrationResult
) -> TrackedBones:
    """
    Applies the calibration to every ``imu/<tracker>`` entry of synchronized frames.

    A frame without a valid reading holds the last one; frames before the first reading
    take the first. Staleness is the distance in ms from the frame time to the reading used.
    Trackers whose calibration failed are left out.

    Raises
    ------

    MissingCalibrationError when a tracker in the frames has no calibration entry.
    """

    if not frames:
        raise EmptyStreamError("no frames to track")

    present = {
        sid.split("/", 1)[1]
        for frame in frames[:1]
        for sid in frame.entries
        if sid.startswith(constants.IMU_PREFIX + "/")
    }

    names: List[str] = []
    columns: List[ndarray] = []
    stale: List[ndarray] = []
    reference = np.array([f.timestamp for f in frames], dtype=np.int64)

    for name in sorted(present, key=_tracker_order):
        if name not in calibration:
            raise MissingCalibrationError(name)

        if not (entry := calibration[name]).ok:
            logger.warning("Skipping %s, its calibration failed: %s", name, entry.failure)
            continue

        sid = f"{constants.IMU_PREFIX}/{name}"
        readings = np.zeros((len(frames), 4))
        used = np.zeros(len(frames), dtype=np.int64)
        have = np.zeros(len(frames), dtype=bool)

        last = None
        for (index, frame) in enumerate(frames):
            if frame.valid(sid):
                last = frame.entries[sid].sample

            if last is not None:
                readings[index] = last.payload.quat
                used[index] = last.timestamp
                have[index] = True

        if not have.any():
            logger.warning("Skipping %s, no reading falls within the gap limit.", name)
            continue

        first = int(np.argmax(have))
        readings[:first] = readings[first]
        used[:first] = used[first]

        world = qmul(
            qmul(entry.heading.quat[None], readings),
            qconj(entry.bone_to_sensor.quat)[None],
        )
        names.append(name)
        columns.append(world)
        stale.append(np.abs(reference - used).astype(float))

        if (count := int((stale[-1] > constants.STALE_AFTER_MS).sum())) > 0:
            logger.warning("%s is stale in %d of %d frames.", name, count, len(frames))

    if not names:
        raise EmptyStreamError("no tracker has calibrated readings")

    return TrackedBones(
        reference,
        tuple(names),
        np.stack(columns, axis=1),
        np.stack(stale, axis=1),
    )


def unwrap_rotvecs(rotvecs: ndarray) -> ndarray:
    """
    Makes a ``(F, ..., 3)`` rotation-vector sequence continuous in time.

    Each vector may be replaced by an equivalent one ``v + 2 pi k v / |v|``, ``k`` in
    ``{-1, 0, 1}``, whichever lies closest to the previous frame.
    """

    out = np.array(rotvecs, dtype=float)

    for index in range(1, len(out)):
        current = out[index]
        norm = np.linalg.norm(current, axis=-1, keepdims=True)
        axis = np.divide(current, norm, out=np.zeros_like(current), where=norm > 0)

        candidates = np.stack([current + k * 2.0 * np.pi * axis for k in (-1, 0, 1)])
        distance = np.linalg.norm(candidates - out[index - 1], axis=-1)
        choice = np.argmin(distance, axis=0)
        out[index] = np.take_along_axis(candidates, choice[None, ..., None], 0)[0]

    return out


def _yaw_quaternions(quaternions: ndarray) -> ndarray:
    "Batched twist about the Z axis; identity where the twist is undefined."

    q = np.asarray(quaternions, dtype=float)
    twist = np.zeros_like(q)
    twist[..., 0] = q[..., 0]
    twist[..., 3] = q[..., 3]

    norm = np.linalg.norm(twist, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < constants.YAW_TOLERANCE
    twist = np.divide(twist, norm, out=np.zeros_like(twist), where=norm > 0)
    twist[degenerate] = _IDENTITY
    return so3.canonicalize(twist)


def _head_arrays(slam: Stream[HeadPose]) -> Tuple[ndarray, ndarray]:
    poses = slam.payloads()
    return (
        so3.as_quaternions([p.rotation for p in poses]),
        np.array([p.position for p in poses]).reshape(len(poses), 3),
    )


def _matching(targets: ndarray, source: ndarray) -> ndarray:
    return np.array([i for (i, _) in nearest_indices(targets, source)], dtype=np.int64)


def pelvis_roots(tracked: TrackedBones, skeleton: SkeletonModel) -> ndarray:
    "Root orientations implied by the tracked pelvis bone."

    rest = skeleton.rest[constants.PELVIS].quat
    return so3.canonicalize(qmul(tracked.bone(constants.PELVIS), qconj(rest)[None]))


def align_heading(
    tracked: TrackedBones, slam: Stream[HeadPose], skeleton: SkeletonModel
) -> Tuple[TrackedBones, Rotation]:
    """
    Moves tracked bones from the pelvis tracker's world into the SLAM world.

    The two gravity-aligned worlds differ by a yaw, estimated as the barycenter of the
    per-frame yaw between the head orientation and the tracked root orientation.

    Returns
    -------

    The re-expressed bones and the yaw ``W_c R_W_p``.
    """

    if len(slam) == 0:
        raise EmptyStreamError("SLAM stream is empty")

    (heads, _) = _head_arrays(slam)
    heads = heads[_matching(tracked.timestamps, slam.timestamps)]
    roots = pelvis_roots(tracked, skeleton)

    yaws = _yaw_quaternions(qmul(heads, qconj(roots)))
    mean = so3.karcher_mean(so3.from_quaternions(yaws)).mean
    offset = so3.yaw_project(mean)

    logger.info("SLAM world heading offset %.3f deg", np.rad2deg(so3.yaw_angle(offset)))
    return (tracked.rotated(offset), offset)


def nominal_offset(skeleton: SkeletonModel) -> ndarray:
    "Pelvis position relative to the head in the rest pose, root frame."

    head = skeleton.joint_index("head")
    return -skeleton.offsets[skeleton.chain(head)].sum(axis=0)


@dataclass(frozen=True, eq=False)
class RootAnchor:
    """
    Per-frame pelvis position derived from the SLAM head pose.

    ``offsets`` are the pelvis positions relative to the head in the torso frame ``torso``;
    ``pelvis_positions = head_positions + torso * offsets``.
    """

    timestamps: ndarray
    head_rotations: ndarray
    head_positions: ndarray
    torso: ndarray
    offsets: ndarray
    pelvis_positions: ndarray
    nominal: ndarray

    def __len__(self) -> int:
        return len(self.timestamps)


def anchor_root(
    slam: Stream[HeadPose],
    skeleton: SkeletonModel,
    tracked: TrackedBones | None = None,
    poses: MotionSequence | None = None,
) -> RootAnchor:
    """
    Maps the head trajectory to the pelvis.

    The torso orientation comes from the tracked pelvis bone when ``tracked`` is given,
    otherwise from the head yaw. The head-to-pelvis offset follows the current pose
    estimate ``poses`` when given, falling back to the rest-pose offset whenever its
    length leaves ``HEAD_OFFSET_RANGE_M``.
    """

    if len(slam) == 0:
        raise EmptyStreamError("SLAM stream is empty")

    (heads, head_positions) = _head_arrays(slam)
    frames = len(slam)

    if tracked is not None:
        matched = _matching(slam.timestamps, tracked.timestamps)
        torso = pelvis_roots(tracked, skeleton)[matched]
    else:
        torso = _yaw_quaternions(heads)

    nominal = nominal_offset(skeleton)
    offsets = np.tile(nominal, (frames, 1))

    if poses is not None:
        rotations = poses.joint_rotations[_matching(slam.timestamps, poses.timestamps)]
        world = world_quaternions(skeleton, np.tile(_IDENTITY, (frames, 1)), rotations)
        joints = world_positions(skeleton, world, np.zeros((frames, 3)))
        offsets = -joints[:, skeleton.joint_index("head")]

        (low, high) = constants.HEAD_OFFSET_RANGE_M
        length = np.linalg.norm(offsets, axis=-1)
        if (bad := (length < low) | (length > high)).any():
            logger.warning(
                "Head-to-pelvis offset out of range in %d frames, using nominal.",
                int(bad.sum()),
            )
            offsets[bad] = nominal

    pelvis = head_positions + qrot(torso, offsets)
    return RootAnchor(
        slam.timestamps.copy(), heads, head_positions, torso, offsets, pelvis, nominal
    )


def frame_rate(timestamps: ndarray, default: float = constants.CAMERA_RATE_HZ) -> float:
    if len(timestamps) < 2:
        return default

    return float(1000.0 / np.median(np.diff(timestamps)))


def naive_pose(
    tracked: TrackedBones, skeleton: SkeletonModel, anchor: RootAnchor
) -> MotionSequence:
    """
    The IMU-only pose: every tracked bone sets its joint's rotation directly.

    Joints without a tracker stay at rest. The root orientation follows the pelvis
    tracker and the root position the anchor.
    """

    tracked = tracked.select(_matching(anchor.timestamps, tracked.timestamps))
    frames = len(anchor)

    targets: Dict[int, ndarray] = {}
    for name in tracked.names:
        bone = skeleton.bone(name)
        if bone.joint == 0:
            continue

        rest = skeleton.rest[name].quat
        targets[bone.joint] = qmul(tracked.bone(name), qconj(rest)[None])

    root = pelvis_roots(tracked, skeleton)
    world = [root]
    local = np.tile(_IDENTITY, (frames, len(skeleton) - 1, 1))

    for joint in range(1, len(skeleton)):
        parent = world[skeleton.parents[joint]]
        if joint in targets:
            local[:, joint - 1] = qmul(qconj(parent), targets[joint])
            world.append(targets[joint])
        else:
            world.append(parent)

    return MotionSequence(
        skeleton,
        anchor.timestamps,
        anchor.pelvis_positions,
        root,
        so3.canonicalize(local),
        frame_rate(anchor.timestamps),
    )


def foot_positions(motion: MotionSequence) -> ndarray:
    "``(F, 2, 3)`` left and right foot joint positions."

    skeleton = motion.skeleton
    feet = [skeleton.joint_index(name) for name in constants.FOOT_JOINTS]
    return positions(skeleton, motion)[:, feet]


def ground_height(
    heights: ndarray,
    timestamps: ndarray,
    window: float = constants.GROUND_WINDOW_S,
) -> float:
    "Lowest foot height within the first ``window`` seconds."

    early = timestamps - timestamps[0] <= window * 1000.0
    return float(np.min(heights[early]))


def detect_contact(
    motion: MotionSequence,
    *,
    height: float = constants.CONTACT_HEIGHT_M,
    speed: float = constants.CONTACT_SPEED_MPS,
    ground: float | None = None,
) -> ndarray:
    """
    ``(F, 2)`` foot contact flags, left then right.

    A foot is in contact when it is less than ``height`` above the ground and moves slower
    than ``speed`` m/s since the previous frame (the first frame looks ahead instead).
    The ground defaults to the lowest foot height over the first second.
    """

    feet = foot_positions(motion)
    if len(feet) == 0:
        return np.zeros((0, 2), dtype=bool)

    z = feet[..., 2]
    ground = ground_height(z, motion.timestamps) if ground is None else ground

    if len(feet) == 1:
        velocity = np.zeros(feet.shape[:2])
    else:
        dt = np.diff(motion.timestamps) / 1000.0
        moved = np.linalg.norm(np.diff(feet, axis=0), axis=-1) / dt[:, None]
        velocity = np.concatenate([moved[:1], moved])

    return (z < ground + height) & (velocity < speed)


def track_recording(
    recording: Recording,
    calibration: CalibrationResult,
    skeleton: SkeletonModel,
    max_gap: int = constants.MAX_GAP_MS,
) -> Tuple[TrackedBones, Rotation]:
    """
    Tracked bones of a recording on the SLAM clock, expressed in the SLAM world.

    Only the IMU streams and the SLAM stream are read.
    """

    if constants.SLAM_STREAM not in recording:
        raise EmptyStreamError("recording has no SLAM stream")

    slam = recording[constants.SLAM_STREAM]
    streams = [slam] + [
        s
        for (sid, s) in sorted(recording.streams.items())
        if sid.startswith(constants.IMU_PREFIX + "/")
    ]
    frames = synchronize(streams, constants.SLAM_STREAM, max_gap)
    return align_heading(track_bones(frames, calibration), slam, skeleton)


def write_tracked(
    tracked: TrackedBones, path: str | Path, metadata: Dict[str, Any] | None = None
) -> None:
    streams = {}
    for (column, name) in enumerate(tracked.names):
        sid = f"{constants.TRACKED_PREFIX}/{name}"
        payloads = [
            TrackedSample(Rotation(q), float(s))
            for (q, s) in zip(tracked.quaternions[:, column], tracked.staleness[:, column])
        ]
        streams[sid] = Stream.of(sid, "tracked", tracked.timestamps, payloads)

    write_recording(Recording(streams, metadata=dict(metadata or {})), path)


def read_tracked(path: str | Path) -> TrackedBones:
    recording = read_recording(path)
    streams = [
        s for s in recording.streams.values() if s.kind == "tracked"
    ]

    if not streams:
        raise SchemaError(f"{path} holds no tracked streams")

    timestamps = streams[0].timestamps
    if any(not np.array_equal(s.timestamps, timestamps) for s in streams):
        raise SchemaError(f"tracked streams in {path} do not share timestamps")

    names = tuple(s.id.split("/", 1)[-1] for s in streams)
    quaternions = np.stack(
        [so3.as_quaternions([p.rotation for p in s.payloads()]) for s in streams], axis=1
    )
    staleness = np.stack([[p.staleness for p in s.payloads()] for s in streams], axis=1)
    return TrackedBones(timestamps, names, quaternions, staleness)
