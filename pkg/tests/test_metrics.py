import numpy as np
import pytest

from kinfuse import constants, so3
from kinfuse.errors import VersionError, ZeroValidPairsError
from kinfuse.metrics import (
    ALL,
    COLUMNS,
    Alignment,
    Clip,
    align_motions,
    build_report,
    jae,
    mpjpe,
    read_report,
    recall,
)
from kinfuse.motions import generate_motion
from kinfuse.skeleton import PoseFrame
from kinfuse.so3 import Rotation

from . import common

_Z = np.array([0.0, 0.0, 1.0])


def _noisy(motion, sigma: float, seed: int):
    rng = np.random.default_rng(seed)
    shape = motion.joint_rotations.shape[:-1] + (3,)
    noise = so3.exp_quaternions(rng.normal(0.0, sigma, shape))
    return motion.replace(
        joint_rotations=so3.qmul(motion.joint_rotations, noise),
        root_positions=motion.root_positions + rng.normal(0.0, 0.01, (len(motion), 3)),
    )


def _loop_positions(skeleton, pose: PoseFrame, identity_root: bool = False) -> np.ndarray:
    root = Rotation.identity() if identity_root else pose.root_orientation
    world = [root]
    points = [np.zeros(3) if identity_root else np.asarray(pose.root_position)]

    for joint in range(1, len(skeleton)):
        parent = skeleton.joints[joint].parent
        world.append(world[parent] @ pose.joints[joint - 1])
        points.append(points[parent] + world[parent].apply(skeleton.offsets[joint]))

    return np.stack(points)


def _oracle(pred, truth, max_gap: int):
    "Per pred frame: nearest truth frame, then per-joint loops."

    skeleton = pred.skeleton
    (errors, angles, valid) = ([], [], 0)
    truth_frames = truth.frames

    for (stamp, pose) in zip(pred.timestamps, pred.frames):
        gaps = [abs(int(t) - int(stamp)) for t in truth.timestamps]
        best = int(np.argmin(gaps))
        if gaps[best] > max_gap:
            continue

        valid += 1
        other = truth_frames[best]
        (a, b) = (_loop_positions(skeleton, pose), _loop_positions(skeleton, other))
        errors.extend(np.linalg.norm(a[j] - b[j]) for j in range(len(skeleton)))

        (a, b) = (
            _loop_positions(skeleton, pose, True),
            _loop_positions(skeleton, other, True),
        )
        for (parent, child) in skeleton.edges():
            (u, v) = (a[child] - a[parent], b[child] - b[parent])
            cosine = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
            angles.append(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))

    return (100.0 * np.mean(errors), np.mean(angles), valid / len(pred))


def test_perfect_prediction() -> None:
    truth = generate_motion("walk", 2.0)
    report = build_report([Clip("walk", truth, truth)], exclusions=[])
    row = report.overall

    assert (row["mpjpe_cm"], row["jae_deg"], row["recall"]) == (0.0, 0.0, 1.0)
    assert row["frames"] == len(truth)


def test_matches_loop_oracle() -> None:
    truth = generate_motion("walk", 1.5)
    pred = _noisy(truth, 0.05, 0).select(np.arange(0, len(truth), 3))
    pred = pred.replace(timestamps=pred.timestamps + 7)
    alignment = align_motions(pred, truth, max_gap=20)
    (error, angle, rate) = _oracle(pred, truth, 20)

    common.assert_isclose(mpjpe(pred, truth, alignment), error, 1e-8)
    common.assert_isclose(jae(pred, truth, alignment), angle, 1e-6)
    common.assert_isclose(recall(alignment), rate, 1e-12)


def test_jae_ignores_global_pose() -> None:
    truth = generate_motion("squat", 1.0)
    pred = _noisy(truth, 0.05, 1)
    spin = Rotation.about_axis(_Z, 0.8)
    moved = pred.replace(
        root_orientations=so3.qmul(spin.quat[None], pred.root_orientations),
        root_positions=pred.root_positions + np.array([3.0, -1.0, 0.5]),
    )
    alignment = align_motions(pred, truth)

    common.assert_isclose(jae(moved, truth, alignment), jae(pred, truth, alignment), 1e-9)
    assert mpjpe(moved, truth, alignment) > mpjpe(pred, truth, alignment) + 100.0


def test_alignment_references() -> None:
    truth = generate_motion("walk", 1.0)
    pred = generate_motion("walk", 2.0)

    by_pred = align_motions(pred, truth)
    assert len(by_pred) == 200
    assert by_pred.frames == 105
    common.assert_isclose(recall(by_pred), 0.525, 1e-12)
    common.assert_equal(by_pred.truth_indices[105:], -np.ones(95, dtype=np.int64))

    by_truth = align_motions(pred, truth, reference="truth")
    assert (len(by_truth), by_truth.frames) == (100, 100)
    common.assert_equal(by_truth.pred_indices, np.arange(100))

    with pytest.raises(ValueError):
        align_motions(pred, truth, reference="both")


def test_calibration_segment_excluded() -> None:
    truth = generate_motion("walk", 2.0)
    start = int(truth.timestamps[0])
    marked = truth.replace(
        markers={constants.CALIBRATION_START: start, constants.CALIBRATION_END: start + 500}
    )
    clip = build_report([Clip("walk", truth, marked)]).clips.iloc[0]

    assert clip["excluded_frames"] == 51
    assert clip["total_frames"] == 149
    assert clip["frames"] == 149

    unmarked = build_report([Clip("walk", truth, marked)], exclusions=[]).clips.iloc[0]
    assert unmarked["excluded_frames"] == 0


def test_empty_and_unmatched() -> None:
    empty = np.zeros(0, dtype=np.int64)
    assert recall(Alignment("pred", empty, empty, empty, np.zeros(0, dtype=bool))) == 0.0

    truth = generate_motion("squat", 1.0)
    late = truth.replace(timestamps=truth.timestamps + 10_000)
    alignment = align_motions(late, truth)
    assert alignment.frames == 0
    assert recall(alignment) == 0.0

    for metric in (mpjpe, jae):
        with pytest.raises(ZeroValidPairsError):
            metric(late, truth, alignment)


def test_pooled_aggregates() -> None:
    walk = generate_motion("walk", 2.0)
    squat = generate_motion("squat", 1.0)
    clips = [
        Clip("walk", _noisy(walk, 0.05, 2), walk, "a"),
        Clip("squat", _noisy(squat, 0.1, 3), squat, "a"),
        Clip("short", _noisy(squat, 0.02, 4).select(np.arange(50)), squat, "b"),
    ]
    report = build_report(clips, exclusions=[])
    rows = report.clips.set_index("clip")

    assert list(report.table.columns) == list(COLUMNS)
    assert len(report.table) == 3 + 2 + 1
    assert report.table.iloc[-1]["dataset"] == ALL

    a = rows.loc[["walk", "squat"]]
    expected = (a["mpjpe_cm"] * a["frames"]).sum() / a["frames"].sum()
    common.assert_isclose(report.dataset("a")["mpjpe_cm"], expected, 1e-9)

    expected = (rows["jae_deg"] * rows["frames"]).sum() / rows["frames"].sum()
    common.assert_isclose(report.overall["jae_deg"], expected, 1e-9)
    assert report.overall["frames"] == 200 + 100 + 50
    common.assert_isclose(report.overall["recall"], 1.0, 1e-12)


def test_csv_report(tmp_path) -> None:
    truth = generate_motion("arm-wave", 1.0)
    clips = [Clip("wave", _noisy(truth, 0.05, 5), truth, "sim")]
    report = build_report(clips, exclusions=[])

    text = report.to_csv()
    assert text == build_report(clips, exclusions=[]).to_csv()
    assert text.splitlines()[0] == f"# version: {constants.REPORT_VERSION}"
    assert text.splitlines()[1] == ",".join(COLUMNS)

    path = tmp_path / "report.csv"
    report.write(path)
    back = read_report(path)
    assert list(back["clip"]) == ["wave", ALL, ALL]
    common.assert_isclose(
        back["mpjpe_cm"].to_numpy(), report.table["mpjpe_cm"].to_numpy(), 1e-6
    )

    path.write_text(text.replace("# version: 1", "# version: 9", 1))
    with pytest.raises(VersionError):
        read_report(path)

    assert "mpjpe_cm" in report.render()
