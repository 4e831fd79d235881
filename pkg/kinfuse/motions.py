"""
Ground-truth motion generators.

All generators keep the spine, neck, collars, ankles and wrists at rest and the root
orientation a pure yaw, so every moving joint is one a tracker pair can observe.
Hip flexion (thigh forward) is a rotation ``Ry(-a)``, knee flexion ``Ry(+a)``.
"""

from __future__ import annotations

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, NamedTuple, Tuple

import numpy as np
from numpy import ndarray
from rich.logging import RichHandler

from . import constants, recording
from .errors import UnknownMotionError
from .skeleton import MotionSequence, SkeletonModel, default_skeleton
from .so3 import qmul

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])


class MotionKind(str, Enum):
    WALK = "walk-cycle"
    SQUAT = "squat"
    ARM_WAVE = "arm-wave"
    SCRIPTED = "scripted-file"

    @classmethod
    def parse(cls, name: str | MotionKind) -> MotionKind:
        aliases = {"walk": cls.WALK, "wave": cls.ARM_WAVE, "scripted": cls.SCRIPTED}

        if isinstance(name, MotionKind):
            return name

        if (kind := aliases.get(name)) is not None:
            return kind

        try:
            return cls(name)
        except ValueError:
            raise UnknownMotionError(f"unknown motion kind {name!r}") from None


class Leg(NamedTuple):
    "Rest geometry of one leg, assumed vertical in the rest pose."

    hip_drop: float
    thigh: float
    shank: float
    foot: float

    @property
    def length(self) -> float:
        return self.thigh + self.shank + self.foot


def leg_geometry(skeleton: SkeletonModel, side: str = "left") -> Leg:
    offsets = skeleton.offsets
    return Leg(
        float(-offsets[skeleton.joint_index(f"{side}_hip")][2]),
        float(np.linalg.norm(offsets[skeleton.joint_index(f"{side}_knee")])),
        float(np.linalg.norm(offsets[skeleton.joint_index(f"{side}_ankle")])),
        float(np.linalg.norm(offsets[skeleton.joint_index(f"{side}_foot")])),
    )


def about(axis: ndarray, angles: ndarray) -> ndarray:
    "``(F, 4)`` quaternions rotating by ``angles`` about a fixed unit ``axis``."

    half = np.asarray(angles, dtype=float)[:, None] / 2.0
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def timeline(duration: float, rate: float, start: int) -> Tuple[ndarray, ndarray]:
    "Integer millisecond timestamps on the ``rate`` grid and matching times in seconds."

    if duration <= 0:
        raise ValueError(f"Duration must be positive, got {duration}.")

    frames = int(round(duration * rate))
    stamps = start + np.round(np.arange(frames) * 1000.0 / rate).astype(np.int64)
    return (stamps, (stamps - start) / 1000.0)


class _Builder:
    def __init__(self, skeleton: SkeletonModel, frames: int) -> None:
        self.skeleton = skeleton
        self.joints = np.zeros((frames, len(skeleton) - 1, 4))
        self.joints[..., 0] = 1.0

    def set(self, name: str, quaternions: ndarray) -> None:
        self.joints[:, self.skeleton.joint_index(name) - 1] = quaternions


def _hermite(s: ndarray, p0: float, p1: float, m0: float, m1: float) -> ndarray:
    s2 = s * s
    s3 = s2 * s
    return (
        (2 * s3 - 3 * s2 + 1) * p0
        + (s3 - 2 * s2 + s) * m0
        + (-2 * s3 + 3 * s2) * p1
        + (s3 - s2) * m1
    )


def _arms_down(builder: _Builder, drop: ndarray | float) -> None:
    frames = len(builder.joints)
    drop = np.broadcast_to(drop, (frames,))
    builder.set("left_shoulder", about(_X, -drop))
    builder.set("right_shoulder", about(_X, drop))


def _walk(
    builder: _Builder,
    t: ndarray,
    speed: float,
    period: float,
    knee_flex: float,
) -> Tuple[ndarray, ndarray]:
    leg = leg_geometry(builder.skeleton)
    half = period / 2.0
    theta_max = np.arcsin(speed * half / 2.0 / leg.length)
    slope = -speed / (leg.length * np.cos(theta_max)) * half

    hips = {}
    stance = np.zeros((len(t), 2), dtype=bool)
    root_z = np.zeros(len(t))

    for (column, (side, shift)) in enumerate((("left", 0.0), ("right", half))):
        tau = np.mod(t + shift, period)
        standing = tau < half
        s = np.where(standing, 0.0, (tau - half) / half)

        stance_theta = np.arcsin(np.clip(speed * (half / 2.0 - tau) / leg.length, -1, 1))
        swing_theta = _hermite(s, -theta_max, theta_max, slope, slope)
        theta = np.where(standing, stance_theta, swing_theta)
        knee = np.where(standing, 0.0, knee_flex * np.sin(np.pi * s) ** 2)

        builder.set(f"{side}_hip", about(_Y, -theta))
        builder.set(f"{side}_knee", about(_Y, knee))
        stance[:, column] = standing
        root_z = np.where(standing, leg.hip_drop + leg.length * np.cos(theta), root_z)
        hips[side] = theta

    # Arms swing against the opposite leg.
    drop = np.deg2rad(75.0)
    for (side, other, sign) in (("left", "right", -1.0), ("right", "left", 1.0)):
        down = about(_X, np.full(len(t), sign * drop))
        swing = about(_Y, -0.5 * hips[other])
        builder.set(f"{side}_shoulder", qmul(swing, down))
        elbow = 0.3 + 0.2 * np.sin(2.0 * np.pi * t / period)
        builder.set(f"{side}_elbow", about(_Z, -sign * elbow))

    root = np.stack([speed * t, np.zeros_like(t), root_z], axis=-1)
    return (root, stance)


def _squat(
    builder: _Builder, t: ndarray, depth: float, frequency: float
) -> ndarray:
    leg = leg_geometry(builder.skeleton)
    phi = depth * (1.0 - np.cos(2.0 * np.pi * frequency * t)) / 2.0

    for side in ("left", "right"):
        builder.set(f"{side}_hip", about(_Y, -phi))
        builder.set(f"{side}_knee", about(_Y, 2.0 * phi))

    _arms_down(builder, np.deg2rad(75.0))

    x = -(leg.thigh - leg.shank - leg.foot) * np.sin(phi)
    z = leg.hip_drop + leg.length * np.cos(phi)
    return np.stack([x, np.zeros_like(t), z], axis=-1)


def _arm_wave(builder: _Builder, t: ndarray, frequency: float) -> ndarray:
    leg = leg_geometry(builder.skeleton)
    raise_angle = np.deg2rad(45.0) + np.deg2rad(40.0) * np.sin(2 * np.pi * frequency * t)
    forward = 0.3 * np.sin(2 * np.pi * frequency * t + 0.7)
    elbow = 0.6 + 0.5 * np.sin(4 * np.pi * frequency * t)

    for (side, sign) in (("left", -1.0), ("right", 1.0)):
        builder.set(
            f"{side}_shoulder",
            qmul(about(_Y, -forward), about(_X, sign * (np.pi / 2 - raise_angle))),
        )
        builder.set(f"{side}_elbow", about(_Z, -sign * elbow))

    height = leg.hip_drop + leg.length
    return np.tile([0.0, 0.0, height], (len(t), 1))


def generate_motion(
    kind: str | MotionKind,
    duration: float,
    skeleton: SkeletonModel | None = None,
    *,
    rate: float = constants.IMU_RATE_HZ,
    start: int = constants.EPOCH_MS,
    heading: float = 0.0,
    speed: float = 1.0,
    period: float = 1.2,
    knee_flex: float = float(np.deg2rad(60.0)),
    depth: float = float(np.deg2rad(60.0)),
    frequency: float | None = None,
    path: str | Path | None = None,
) -> MotionSequence:
    """
    Generates a ground-truth motion on a ``rate`` grid starting at ``start`` ms.

    Parameters
    ----------

    kind:
        ``walk-cycle`` (forward along ``heading`` at ``speed`` m/s with gait ``period`` s),
        ``squat`` (``depth`` rad hip flexion at ``frequency``, default 0.4 Hz),
        ``arm-wave`` (default 0.5 Hz) or ``scripted-file`` (read from ``path``).

    Returns
    -------

    A sequence of ``round(duration * rate)`` frames. Walks carry ground-truth stance flags.

    Raises
    ------

    UnknownMotionError for an unknown kind. Scripted files raise the recording errors.
    """

    kind = MotionKind.parse(kind)
    skeleton = default_skeleton() if skeleton is None else skeleton

    if kind is MotionKind.SCRIPTED:
        return _scripted(path, duration, skeleton)

    (stamps, t) = timeline(duration, rate, start)
    builder = _Builder(skeleton, len(t))
    stance = None

    if kind is MotionKind.WALK:
        (root, stance) = _walk(builder, t, speed, period, knee_flex)
    elif kind is MotionKind.SQUAT:
        root = _squat(builder, t, depth, 0.4 if frequency is None else frequency)
    else:
        root = _arm_wave(builder, t, 0.5 if frequency is None else frequency)

    yaw = about(_Z, np.full(len(t), heading))
    (c, s) = (np.cos(heading), np.sin(heading))
    root = root @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])

    logger.debug("Generated %s with %d frames", kind.value, len(t))
    return MotionSequence(skeleton, stamps, root, yaw, builder.joints, rate, stance)


def _scripted(
    path: str | Path | None, duration: float, skeleton: SkeletonModel
) -> MotionSequence:
    if path is None:
        raise UnknownMotionError("scripted-file motion needs a path")

    if duration <= 0:
        raise ValueError(f"Duration must be positive, got {duration}.")

    motion = recording.read_motion(path, skeleton)
    if len(motion) == 0:
        return motion

    keep = np.flatnonzero(motion.timestamps - motion.timestamps[0] < duration * 1000.0)
    return motion.select(keep)


def stance_duty(stance: ndarray) -> Dict[str, float]:
    "Fraction of frames each foot spends in stance."

    return {"left": float(stance[:, 0].mean()), "right": float(stance[:, 1].mean())}
