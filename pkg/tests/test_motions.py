import numpy as np
import pytest

from kinfuse import constants
from kinfuse.errors import UnknownMotionError
from kinfuse.motions import MotionKind, generate_motion, leg_geometry, stance_duty
from kinfuse.recording import write_motion
from kinfuse.skeleton import default_skeleton, positions

from . import common


def _feet(motion) -> np.ndarray:
    skeleton = motion.skeleton
    indices = [skeleton.joint_index(name) for name in constants.FOOT_JOINTS]
    return positions(skeleton, motion)[:, indices]


def test_kind_parsing() -> None:
    common.call(
        lambda name, kind: common.assert_equal(MotionKind.parse(name), kind),
        [
            ["walk-cycle", MotionKind.WALK],
            ["walk", MotionKind.WALK],
            ["wave", MotionKind.ARM_WAVE],
            [MotionKind.SQUAT, MotionKind.SQUAT],
        ],
    )
    with pytest.raises(UnknownMotionError):
        MotionKind.parse("cartwheel")


def test_timeline() -> None:
    motion = generate_motion("squat", 2.0, start=1000)
    assert len(motion) == 200
    assert motion.timestamps[0] == 1000
    common.assert_equal(np.diff(motion.timestamps), np.full(199, 10))
    assert motion.rate == constants.IMU_RATE_HZ


def test_leg_geometry() -> None:
    leg = leg_geometry(default_skeleton())
    common.assert_isclose(leg.length, 0.85, 1e-12)
    common.assert_isclose(leg.hip_drop, 0.05, 1e-12)


def test_walk_stance_foot_is_planted() -> None:
    motion = generate_motion("walk-cycle", 4.0)
    feet = _feet(motion)
    assert motion.stance is not None

    for side in range(2):
        standing = motion.stance[:, side]
        common.assert_isclose(feet[standing, side, 2], np.zeros(standing.sum()), 1e-9)

        both = standing[1:] & standing[:-1]
        steps = np.linalg.norm(np.diff(feet[:, side, :2], axis=0), axis=-1)
        assert np.all(steps[both] < 1e-9)


def test_walk_advances_along_heading() -> None:
    motion = generate_motion("walk", 3.0, heading=np.pi / 2, speed=1.2)
    travelled = motion.root_positions[-1] - motion.root_positions[0]
    elapsed = (motion.timestamps[-1] - motion.timestamps[0]) / 1000.0

    common.assert_isclose(travelled[0], 0.0, 1e-9)
    common.assert_isclose(travelled[1], 1.2 * elapsed, 1e-9)


def test_walk_duty_cycle() -> None:
    motion = generate_motion("walk", 12.0)
    duty = stance_duty(motion.stance)
    assert abs(duty["left"] - 0.5) < 0.02
    assert abs(duty["right"] - 0.5) < 0.02


def test_squat_feet_stay_fixed() -> None:
    motion = generate_motion("squat", 5.0, depth=np.deg2rad(70.0))
    feet = _feet(motion)

    common.assert_isclose(feet - feet[:1], np.zeros_like(feet), 1e-9)
    common.assert_isclose(feet[..., 2], np.zeros(feet.shape[:2]), 1e-9)
    assert motion.root_positions[:, 2].min() < motion.root_positions[0, 2] - 0.1


def test_arm_wave_keeps_root_still() -> None:
    motion = generate_motion("arm-wave", 3.0)
    common.assert_isclose(
        motion.root_positions - motion.root_positions[:1],
        np.zeros_like(motion.root_positions),
        1e-12,
    )
    assert motion.stance is None

    wrist = motion.skeleton.joint_index("left_wrist")
    heights = positions(motion.skeleton, motion)[:, wrist, 2]
    assert heights.max() - heights.min() > 0.2


def test_scripted_file(tmp_path) -> None:
    source = generate_motion("squat", 2.0)
    path = tmp_path / "squat.kfm"
    write_motion(source, path)

    clipped = generate_motion("scripted-file", 1.0, path=path)
    assert len(clipped) == 100
    assert clipped == source.select(np.arange(100))

    with pytest.raises(UnknownMotionError):
        generate_motion("scripted-file", 1.0)


def test_bad_duration() -> None:
    with pytest.raises(ValueError):
        generate_motion("walk", 0.0)
