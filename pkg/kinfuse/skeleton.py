"""
Kinematic body model: joint tree, rest offsets, bones and forward kinematics.

A pose stores one local rotation per non-root joint plus a world-frame root pose. A joint's
world orientation is the product of the local rotations along its chain; a bone's world
orientation is its joint's world orientation times the bone's rest orientation, whose Y
axis points from the joint to the bone's child.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
import yaml
from numpy import ndarray
from rich.logging import RichHandler

from . import constants, so3
from .errors import SkeletonFileError, SkeletonMismatchError, UnknownBoneError
from .interfaces import Stream
from .so3 import Rotation

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

DEFAULT_SKELETON = Path(__file__).parent / "data" / "skeleton.yaml"

_Y_AXIS = np.array([0.0, 1.0, 0.0])


class Joint(NamedTuple):
    name: str
    parent: int
    offset: Tuple[float, float, float]


class Bone(NamedTuple):
    name: str
    joint: int
    child: int


def rest_rotation(direction: ndarray) -> Rotation:
    "The smallest rotation taking the Y axis onto ``direction``."

    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    axis = np.cross(_Y_AXIS, d)
    sine = np.linalg.norm(axis)
    cosine = float(_Y_AXIS @ d)

    if sine < 1e-12:
        if cosine > 0:
            return Rotation.identity()
        return Rotation.about_axis([0.0, 0.0, 1.0], np.pi)

    return Rotation.about_axis(axis, np.arctan2(sine, cosine))


@dataclass(frozen=True, eq=False)
class SkeletonModel:
    name: str
    joints: Tuple[Joint, ...]
    bones: Dict[str, Bone]
    tracked: Tuple[str, ...]
    version: int = constants.SKELETON_VERSION

    parents: ndarray = field(init=False, repr=False)
    offsets: ndarray = field(init=False, repr=False)
    rest: Dict[str, Rotation] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._check()

        parents = np.array([j.parent for j in self.joints], dtype=np.int64)
        offsets = np.array([j.offset for j in self.joints], dtype=float)
        parents.setflags(write=False)
        offsets.setflags(write=False)

        rest = {}
        for bone in self.bones.values():
            direction = offsets[bone.child]
            if np.linalg.norm(direction) == 0:
                rest[bone.name] = Rotation.identity()
            else:
                rest[bone.name] = rest_rotation(direction)

        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "rest", rest)

    def _check(self) -> None:
        roots = [i for (i, j) in enumerate(self.joints) if j.parent < 0]
        if roots != [0]:
            raise SkeletonFileError(f"expected joint 0 as the single root, got {roots}")

        for (index, joint) in enumerate(self.joints):
            if joint.parent >= index:
                raise SkeletonFileError(
                    f"joint {joint.name!r} appears before its parent"
                )
            if len(joint.offset) != 3 or not np.all(np.isfinite(joint.offset)):
                raise SkeletonFileError(f"joint {joint.name!r} has a bad offset")

        for bone in self.bones.values():
            if not 0 <= bone.child < len(self.joints):
                raise SkeletonFileError(f"bone {bone.name!r} has no child joint")
            if self.joints[bone.child].parent != bone.joint:
                raise SkeletonFileError(f"bone {bone.name!r} is not a tree edge")

        for name in self.tracked:
            if name not in self.bones:
                raise SkeletonFileError(f"tracked bone {name!r} is not defined")

    def __len__(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> Tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    def joint_index(self, name: str) -> int:
        for (index, joint) in enumerate(self.joints):
            if joint.name == name:
                return index

        raise UnknownBoneError(name)

    def bone(self, name: str) -> Bone:
        if (bone := self.bones.get(name)) is None:
            raise UnknownBoneError(name)

        return bone

    def edges(self) -> List[Tuple[int, int]]:
        "Every parent -> child pair of the tree."

        return [(j.parent, i) for (i, j) in enumerate(self.joints) if j.parent >= 0]

    def chain(self, joint: int) -> List[int]:
        "Joint indices from the root down to ``joint``."

        path = []
        while joint >= 0:
            path.append(joint)
            joint = self.joints[joint].parent
        return path[::-1]


def load_skeleton(path: str | Path) -> SkeletonModel:
    try:
        with open(path) as f:
            document = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise SkeletonFileError(f"cannot read {path}: {e}") from e

    return skeleton_from_dict(document)


def skeleton_from_dict(document: Any) -> SkeletonModel:
    if not isinstance(document, dict):
        raise SkeletonFileError("skeleton document must be a mapping")

    if (version := document.get("version")) != constants.SKELETON_VERSION:
        raise SkeletonFileError(f"unsupported skeleton version {version!r}")

    try:
        names = [j["name"] for j in document["joints"]]
        joints = tuple(
            Joint(
                j["name"],
                -1 if j["parent"] is None else names.index(j["parent"]),
                tuple(float(x) for x in j["offset"]),
            )
            for j in document["joints"]
        )
        bones = {
            name: Bone(name, names.index(b["joint"]), names.index(b["child"]))
            for (name, b) in document["bones"].items()
        }
        tracked = tuple(document["tracked"])
    except (KeyError, TypeError, ValueError) as e:
        raise SkeletonFileError(f"malformed skeleton document: {e!r}") from e

    return SkeletonModel(document.get("name", ""), joints, bones, tracked, version)


def skeleton_to_dict(skeleton: SkeletonModel) -> Dict[str, Any]:
    names = skeleton.joint_names
    return {
        "version": skeleton.version,
        "name": skeleton.name,
        "joints": [
            {
                "name": j.name,
                "parent": None if j.parent < 0 else names[j.parent],
                "offset": list(j.offset),
            }
            for j in skeleton.joints
        ],
        "bones": {
            b.name: {"joint": names[b.joint], "child": names[b.child]}
            for b in skeleton.bones.values()
        },
        "tracked": list(skeleton.tracked),
    }


def dump_skeleton(skeleton: SkeletonModel, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(skeleton_to_dict(skeleton), f, sort_keys=False)


@functools.lru_cache(maxsize=None)
def default_skeleton() -> SkeletonModel:
    "The shipped 22-joint model."

    return load_skeleton(DEFAULT_SKELETON)


@dataclass(frozen=True, eq=False)
class PoseFrame:
    timestamp: int
    root_orientation: Rotation
    root_position: ndarray
    joints: Tuple[Rotation, ...]

    def __post_init__(self) -> None:
        position = np.asarray(self.root_position, dtype=float)
        if position.shape != (3,):
            raise ValueError(f"Root position must have shape (3,), got {position.shape}.")

        position.setflags(write=False)
        object.__setattr__(self, "root_position", position)
        object.__setattr__(self, "joints", tuple(self.joints))

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, PoseFrame):
            return NotImplemented

        return (
            self.timestamp == other.timestamp
            and self.root_orientation == other.root_orientation
            and bool(np.array_equal(self.root_position, other.root_position))
            and len(self.joints) == len(other.joints)
            and all(a == b for (a, b) in zip(self.joints, other.joints))
        )

    __hash__ = None  # type: ignore

    @classmethod
    def rest(
        cls,
        skeleton: SkeletonModel,
        timestamp: int = 0,
        root_orientation: Rotation | None = None,
        root_position: Sequence[float] | ndarray = (0.0, 0.0, 0.0),
    ) -> PoseFrame:
        return cls(
            timestamp,
            root_orientation or Rotation.identity(),
            np.asarray(root_position, dtype=float),
            tuple(Rotation.identity() for _ in range(len(skeleton) - 1)),
        )

    def joint_quaternions(self) -> ndarray:
        return so3.as_quaternions(self.joints)


def _quaternions_equal(a: ndarray, b: ndarray) -> bool:
    return a.shape == b.shape and bool(np.allclose(a, b, rtol=0.0, atol=1e-12))


def _check_pose(skeleton: SkeletonModel, pose: PoseFrame) -> None:
    if len(pose.joints) != len(skeleton) - 1:
        raise SkeletonMismatchError(
            f"pose has {len(pose.joints)} joint rotations,"
            f" skeleton needs {len(skeleton) - 1}"
        )


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """
    A time-indexed pose sequence, stored as arrays.

    Quaternions are canonical ``(w, x, y, z)``. ``stance`` optionally holds per-frame
    ground-truth foot stance flags for the left and right foot. ``markers`` carries named
    timestamps such as the calibration segment bounds.
    """

    skeleton: SkeletonModel
    timestamps: ndarray
    root_positions: ndarray
    root_orientations: ndarray
    joint_rotations: ndarray
    rate: float
    stance: ndarray | None = None
    markers: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        timestamps = np.asarray(self.timestamps, dtype=np.int64)
        frames = len(timestamps)
        joints = len(self.skeleton) - 1

        root_positions = np.asarray(self.root_positions, dtype=float).reshape(frames, 3)
        root_orientations = so3.canonicalize(
            np.asarray(self.root_orientations, dtype=float).reshape(frames, 4)
        )
        joint_rotations = np.asarray(self.joint_rotations, dtype=float)

        if joint_rotations.shape != (frames, joints, 4):
            raise SkeletonMismatchError(
                f"expected joint rotations of shape {(frames, joints, 4)},"
                f" got {joint_rotations.shape}"
            )

        if np.any(np.diff(timestamps) <= 0):
            raise ValueError("Motion timestamps must be strictly increasing.")

        if self.rate <= 0:
            raise ValueError(f"Invalid rate {self.rate}.")

        arrays = {
            "timestamps": timestamps,
            "root_positions": root_positions,
            "root_orientations": root_orientations,
            "joint_rotations": so3.canonicalize(joint_rotations),
        }

        if self.stance is not None:
            arrays["stance"] = np.asarray(self.stance, dtype=bool).reshape(frames, 2)

        for (name, value) in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        object.__setattr__(self, "markers", dict(self.markers))

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, index: int) -> PoseFrame:
        return PoseFrame(
            int(self.timestamps[index]),
            Rotation(self.root_orientations[index]),
            self.root_positions[index].copy(),
            tuple(so3.from_quaternions(self.joint_rotations[index])),
        )

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, MotionSequence):
            return NotImplemented

        same_stance = (self.stance is None and other.stance is None) or (
            self.stance is not None
            and other.stance is not None
            and bool(np.array_equal(self.stance, other.stance))
        )
        return (
            self.skeleton.version == other.skeleton.version
            and self.skeleton.joint_names == other.skeleton.joint_names
            and self.rate == other.rate
            and self.markers == other.markers
            and same_stance
            and bool(np.array_equal(self.timestamps, other.timestamps))
            and bool(np.array_equal(self.root_positions, other.root_positions))
            and _quaternions_equal(self.root_orientations, other.root_orientations)
            and _quaternions_equal(self.joint_rotations, other.joint_rotations)
        )

    __hash__ = None  # type: ignore

    @property
    def frames(self) -> Tuple[PoseFrame, ...]:
        return tuple(self[i] for i in range(len(self)))

    @classmethod
    def from_frames(
        cls,
        skeleton: SkeletonModel,
        frames: Sequence[PoseFrame],
        rate: float,
        stance: ndarray | None = None,
        markers: Dict[str, int] | None = None,
    ) -> MotionSequence:
        for frame in frames:
            _check_pose(skeleton, frame)

        return cls(
            skeleton,
            np.array([f.timestamp for f in frames], dtype=np.int64),
            np.array([f.root_position for f in frames]).reshape(len(frames), 3),
            so3.as_quaternions([f.root_orientation for f in frames]).reshape(-1, 4),
            np.array([f.joint_quaternions() for f in frames]).reshape(
                len(frames), len(skeleton) - 1, 4
            ),
            rate,
            stance,
            markers or {},
        )

    def select(self, indices: Sequence[int] | ndarray) -> MotionSequence:
        indices = np.asarray(indices, dtype=np.int64)
        return MotionSequence(
            self.skeleton,
            self.timestamps[indices],
            self.root_positions[indices],
            self.root_orientations[indices],
            self.joint_rotations[indices],
            self.rate,
            None if self.stance is None else self.stance[indices],
            self.markers,
        )

    def replace(self, **changes: Any) -> MotionSequence:
        values = {
            "skeleton": self.skeleton,
            "timestamps": self.timestamps,
            "root_positions": self.root_positions,
            "root_orientations": self.root_orientations,
            "joint_rotations": self.joint_rotations,
            "rate": self.rate,
            "stance": self.stance,
            "markers": self.markers,
        }
        values.update(changes)
        return MotionSequence(**values)

    def to_stream(self, id: str) -> Stream[PoseFrame]:
        return Stream.of(id, "motion", self.timestamps, self.frames)


class Kinematics(NamedTuple):
    "World-frame joint positions ``(J, 3)``, joint orientations and bone orientations."

    positions: ndarray
    joints: List[Rotation]
    bones: Dict[str, Rotation]


def world_quaternions(
    skeleton: SkeletonModel, root_orientations: ndarray, joint_rotations: ndarray
) -> ndarray:
    """
    Accumulates local joint rotations down the tree.

    Parameters
    ----------

    root_orientations:
        ``(..., 4)`` world orientations of the root.
    joint_rotations:
        ``(..., J - 1, 4)`` local rotations of the non-root joints.

    Returns
    -------

    ``(..., J, 4)`` world orientations of every joint.
    """

    world = [np.asarray(root_orientations, dtype=float)]
    for index in range(1, len(skeleton)):
        parent = skeleton.parents[index]
        world.append(so3.qmul(world[parent], joint_rotations[..., index - 1, :]))
    return np.stack(world, axis=-2)


def world_positions(
    skeleton: SkeletonModel, world: ndarray, root_positions: ndarray
) -> ndarray:
    "``(..., J, 3)`` joint positions from ``(..., J, 4)`` world orientations."

    positions = [np.asarray(root_positions, dtype=float)]
    for index in range(1, len(skeleton)):
        parent = skeleton.parents[index]
        offset = np.broadcast_to(skeleton.offsets[index], positions[parent].shape)
        positions.append(positions[parent] + so3.qrot(world[..., parent, :], offset))
    return np.stack(positions, axis=-2)


def bone_quaternions(
    skeleton: SkeletonModel, world: ndarray, names: Sequence[str]
) -> ndarray:
    "``(..., B, 4)`` world orientations of the named bones."

    out = []
    for name in names:
        bone = skeleton.bone(name)
        rest = np.broadcast_to(skeleton.rest[name].quat, world[..., bone.joint, :].shape)
        out.append(so3.qmul(world[..., bone.joint, :], rest))
    return so3.canonicalize(np.stack(out, axis=-2))


def positions(skeleton: SkeletonModel, motion: MotionSequence) -> ndarray:
    "Batched forward kinematics of a whole sequence, ``(F, J, 3)`` meters."

    world = world_quaternions(skeleton, motion.root_orientations, motion.joint_rotations)
    return world_positions(skeleton, world, motion.root_positions)


def forward_kinematics(skeleton: SkeletonModel, pose: PoseFrame) -> Kinematics:
    _check_pose(skeleton, pose)

    world = world_quaternions(
        skeleton, pose.root_orientation.quat, pose.joint_quaternions()
    )
    joint_positions = world_positions(skeleton, world, pose.root_position)
    names = list(skeleton.bones)
    bones = bone_quaternions(skeleton, world, names)

    logger.debug("FK of pose at %s", pose.timestamp)
    return Kinematics(
        joint_positions,
        so3.from_quaternions(world),
        dict(zip(names, so3.from_quaternions(bones))),
    )


def bone_world_orientation(
    skeleton: SkeletonModel, pose: PoseFrame, bone_name: str
) -> Rotation:
    _check_pose(skeleton, pose)
    bone = skeleton.bone(bone_name)

    world = pose.root_orientation
    for joint in skeleton.chain(bone.joint)[1:]:
        world = world @ pose.joints[joint - 1]

    return world @ skeleton.rest[bone_name]


def relative_rotation(
    skeleton: SkeletonModel, pose: PoseFrame, bone_a: str, bone_b: str
) -> Rotation:
    "Orientation of ``bone_b`` expressed in the frame of ``bone_a``."

    a = bone_world_orientation(skeleton, pose, bone_a)
    b = bone_world_orientation(skeleton, pose, bone_b)
    return a.inverse() @ b
