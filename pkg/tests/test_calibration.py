import dataclasses

import numpy as np
import pytest

from kinfuse import constants, so3
from kinfuse.calibration import (
    CalibrationInput,
    TrackerInput,
    Triple,
    build_calibration_input,
    calibrate,
    calibration_window,
    dump_calibration,
    estimate_bone_to_sensor,
    estimate_world_alignment,
    load_calibration,
)
from kinfuse.errors import (
    KarcherConvergenceError,
    MissingMarkerError,
    PelvisAnchorError,
    TooFewSamplesError,
)
from kinfuse.motions import generate_motion
from kinfuse.simulate import SimConfig, simulate_sensors
from kinfuse.so3 import Rotation

from . import common


def _bundle(cfg: SimConfig, duration: float = 8.0):
    return simulate_sensors(generate_motion("walk", duration), cfg)


def test_noiseless_recovery() -> None:
    bundle = _bundle(SimConfig.noiseless(seed=1))
    result = calibrate(build_calibration_input(bundle.to_recording()))
    truth = bundle.truth
    window = calibration_window(bundle.to_recording())

    assert result.succeeded() == sorted(constants.TRACKED_BONES)
    assert result.failed() == {}
    for name in constants.TRACKED_BONES:
        common.assert_rotation_close(result[name].bone_to_sensor, truth.bone_to_sensor[name])
        common.assert_rotation_close(result[name].heading, truth.heading[name])
        assert result[name].diagnostics.samples == len(bundle.tags[name].between(*window))

    common.assert_isclose(result.gravity_error, 0.0, 1e-9)


def test_noisy_recovery() -> None:
    bundle = _bundle(SimConfig(seed=2))
    result = calibrate(build_calibration_input(bundle.to_recording()), trim=True)
    bound = np.deg2rad(2.0)

    for name in constants.TRACKED_BONES:
        common.assert_rotation_close(
            result[name].bone_to_sensor, bundle.truth.bone_to_sensor[name], bound
        )
        common.assert_rotation_close(result[name].heading, bundle.truth.heading[name], bound)


def test_single_tracker_estimates() -> None:
    bundle = _bundle(SimConfig.noiseless(seed=3))
    input = build_calibration_input(bundle.to_recording())

    bone = estimate_bone_to_sensor(input, "left_thigh")
    common.assert_rotation_close(bone.mean, bundle.truth.bone_to_sensor["left_thigh"])

    world = estimate_world_alignment(input, "right_shank")
    common.assert_rotation_close(world.rotation, bundle.truth.heading["right_shank"])
    assert not world.yaw_ambiguous

    with pytest.raises(TooFewSamplesError):
        estimate_bone_to_sensor(input, "left_thigh", minimum=1000)


def test_window_bounds() -> None:
    bundle = _bundle(SimConfig.noiseless(seed=4, calibration_duration=2.0))
    recording = bundle.to_recording()
    (start, end) = calibration_window(recording)
    assert end - start == 2000

    input = build_calibration_input(recording)
    for (name, tracker) in input.trackers.items():
        assert len(tracker.triples) == len(bundle.tags[name].between(start, end))
        assert all(start <= t.timestamp <= end for t in tracker.triples)

    wide = build_calibration_input(recording, (start, start + 4000))
    expected = bundle.tags["pelvis"].between(start, start + 4000)
    assert len(wide["pelvis"].triples) == len(expected)
    assert len(wide["pelvis"].triples) > len(input["pelvis"].triples)


def test_starved_tracker_fails_alone() -> None:
    bundle = _bundle(SimConfig.noiseless(seed=5, dropout_overrides={"left_shank": 1.0}))
    result = calibrate(build_calibration_input(bundle.to_recording()))

    assert list(result.failed()) == ["left_shank"]
    assert result["left_shank"].bone_to_sensor is None
    assert "left_shank" not in result.succeeded()
    assert len(result.succeeded()) == len(constants.TRACKED_BONES) - 1


def test_pelvis_must_anchor() -> None:
    bundle = _bundle(SimConfig.noiseless(seed=6, dropout_overrides={"pelvis": 1.0}))
    with pytest.raises(PelvisAnchorError):
        calibrate(build_calibration_input(bundle.to_recording()))

    short = _bundle(SimConfig.noiseless(seed=6, calibration_duration=0.5))
    with pytest.raises(PelvisAnchorError):
        calibrate(build_calibration_input(short.to_recording()))


def test_missing_marker() -> None:
    bundle = _bundle(SimConfig.noiseless(), 2.0)
    recording = bundle.to_recording()
    unmarked = dataclasses.replace(recording, markers={})

    with pytest.raises(MissingMarkerError):
        build_calibration_input(unmarked)

    everything = build_calibration_input(unmarked, (0, 2 ** 62))
    assert len(everything["pelvis"].triples) == len(bundle.tags["pelvis"])


def test_workers_agree() -> None:
    input = build_calibration_input(_bundle(SimConfig(seed=7)).to_recording())
    assert calibrate(input, workers=4) == calibrate(input, workers=1)


def test_document_roundtrip(tmp_path) -> None:
    bundle = _bundle(SimConfig(seed=8, dropout_overrides={"right_forearm": 1.0}))
    result = calibrate(build_calibration_input(bundle.to_recording()))
    path = tmp_path / "calibration.yaml"

    dump_calibration(result, path)
    back = load_calibration(path)

    assert back.failed() == result.failed()
    assert back.gravity_error == result.gravity_error
    for name in result.succeeded():
        common.assert_rotation_close(back[name].heading, result[name].heading, 1e-7)
        assert back[name].diagnostics == result[name].diagnostics


def test_karcher_failure_propagates(monkeypatch) -> None:
    input = build_calibration_input(_bundle(SimConfig.noiseless(seed=9)).to_recording())
    original = so3.karcher_mean

    # The pelvis takes the first two averages; later calls belong to the other trackers.
    for allowed in (0, 2):
        calls = []

        def failing(samples, *args, **kwargs):
            calls.append(len(samples))
            if len(calls) > allowed:
                raise KarcherConvergenceError(samples[0], 1.0, 100)
            return original(samples, *args, **kwargs)

        monkeypatch.setattr(so3, "karcher_mean", failing)
        with pytest.raises(KarcherConvergenceError):
            calibrate(input)

    monkeypatch.setattr(so3, "karcher_mean", original)
    assert calibrate(input).failed() == {}


def _rotated_input(input: CalibrationInput, q: Rotation) -> CalibrationInput:
    "The same session seen from a camera turned by ``q``."

    trackers = {}
    for (name, tracker) in input.trackers.items():
        triples = tuple(
            t._replace(tag=q @ t.tag, bone=None if t.bone is None else q @ t.bone)
            for t in tracker.triples
        )
        trackers[name] = tracker._replace(triples=triples)

    gravity = None if input.gravity is None else q.apply(input.gravity)
    return dataclasses.replace(input, trackers=trackers, gravity=gravity)


def test_camera_frame_invariance() -> None:
    input = build_calibration_input(_bundle(SimConfig(seed=10)).to_recording())
    q = Rotation.about_axis([0.3, -1.0, 0.5], 2.1)

    expected = calibrate(input)
    actual = calibrate(_rotated_input(input, q))

    assert actual.succeeded() == expected.succeeded()
    common.assert_isclose(actual.gravity_error, expected.gravity_error, 1e-9)
    for name in expected.succeeded():
        (a, b) = (actual[name], expected[name])
        common.assert_rotation_close(a.bone_to_sensor, b.bone_to_sensor)
        common.assert_rotation_close(a.heading, b.heading)


def _synthetic_tracker(rng: np.random.Generator, truth: Rotation, count: int) -> TrackerInput:
    "Tag and bone detections with 1 and 2 degree noise around an exact ``truth`` offset."

    tag_to_sensor = Rotation.random(rng)
    bones = common.random_quaternions(rng, count)
    tags = so3.qmul(so3.qmul(bones, truth.quat[None]), tag_to_sensor.inverse().quat[None])

    def noisy(quaternions, degrees: float):
        noise = so3.exp_quaternions(rng.normal(0.0, np.deg2rad(degrees), (count, 3)))
        return so3.from_quaternions(so3.qmul(quaternions, noise))

    triples = tuple(
        Triple(1000 * k, tag, bone, Rotation.identity())
        for (k, (tag, bone)) in enumerate(zip(noisy(tags, 1.0), noisy(bones, 2.0)))
    )
    return TrackerInput("left_thigh", triples, tag_to_sensor)


def test_recovery_improves_with_samples() -> None:
    rng = np.random.default_rng(11)
    medians = []

    for count in (10, 30, 100, 300):
        errors = []
        for _ in range(100):
            truth = Rotation.random(rng)
            input = CalibrationInput({"left_thigh": _synthetic_tracker(rng, truth, count)})
            estimate = estimate_bone_to_sensor(input, "left_thigh", minimum=10)
            errors.append(common.angle_between(estimate.mean, truth))
        medians.append(float(np.median(errors)))

    assert all(b <= a for (a, b) in zip(medians, medians[1:])), medians
    assert medians[2] < np.deg2rad(1.0)


def test_full_rotation_heading() -> None:
    bundle = _bundle(SimConfig.noiseless(seed=12))
    result = calibrate(build_calibration_input(bundle.to_recording()), yaw_only=False)

    assert result.yaw_only is False
    for name in constants.TRACKED_BONES:
        common.assert_rotation_close(result[name].heading, bundle.truth.heading[name])
        assert not result[name].diagnostics.yaw_ambiguous
