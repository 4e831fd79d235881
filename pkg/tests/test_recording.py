import struct

import numpy as np
import pytest
import yaml

from kinfuse import constants
from kinfuse.errors import SchemaError, TruncatedFileError, VersionError
from kinfuse.interfaces import HeadPose, Stream, TrackedSample
from kinfuse.motions import generate_motion
from kinfuse.recording import (
    MAGIC,
    Recording,
    read_motion,
    read_recording,
    write_motion,
    write_recording,
)
from kinfuse.so3 import Rotation

from . import common


def _recording() -> Recording:
    rng = np.random.default_rng(0)
    rotations = Stream.of(
        "imu/pelvis",
        "rotation",
        [10, 20, 20, 40],
        [Rotation.random(rng) for _ in range(4)],
    )
    poses = Stream.of(
        "slam",
        "head_pose",
        [15, 45],
        [HeadPose(Rotation.random(rng), rng.standard_normal(3)) for _ in range(2)],
    )
    tracked = Stream.of(
        "tracked/pelvis",
        "tracked",
        [15, 45],
        [TrackedSample(Rotation.random(rng), s) for s in (0.0, 12.5)],
    )
    return Recording(
        {s.id: s for s in (rotations, poses, tracked)},
        {"calibration_start": 10, "calibration_end": 40},
        {"note": "unit", "values": [1, 2]},
        constants.SKELETON_VERSION,
        "abc123",
    )


def test_roundtrip(tmp_path) -> None:
    path = tmp_path / "session.kfr"
    recording = _recording()
    write_recording(recording, path)
    assert read_recording(path) == recording


def test_byte_layout(tmp_path) -> None:
    path = tmp_path / "session.kfr"
    recording = _recording()
    write_recording(recording, path)
    data = path.read_bytes()

    assert data.startswith(MAGIC)
    (length,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = yaml.safe_load(data[start : start + length])

    assert header["version"] == constants.RECORDING_VERSION
    assert [s["id"] for s in header["streams"]] == ["imu/pelvis", "slam", "tracked/pelvis"]
    assert [s["count"] for s in header["streams"]] == [4, 2, 2]

    offset = start + length
    order = []
    while offset < len(data):
        (size,) = struct.unpack_from("<I", data, offset)
        index = data[offset + 4]
        (timestamp,) = struct.unpack_from("<q", data, offset + 5)
        order.append((timestamp, index, size))
        offset += 4 + size

    assert offset == len(data)
    assert [(t, i) for (t, i, _) in order] == [
        (10, 0), (15, 1), (15, 2), (20, 0), (20, 0), (40, 0), (45, 1), (45, 2)
    ]
    assert {i: s for (_, i, s) in order} == {0: 1 + 8 + 32, 1: 1 + 8 + 56, 2: 1 + 8 + 40}


def test_deterministic_bytes(tmp_path) -> None:
    (a, b) = (tmp_path / "a.kfr", tmp_path / "b.kfr")
    write_recording(_recording(), a)
    write_recording(_recording(), b)
    assert a.read_bytes() == b.read_bytes()


def test_version_mismatch_loads_nothing(tmp_path) -> None:
    path = tmp_path / "future.kfr"
    write_recording(_recording(), path)
    data = path.read_bytes()

    (length,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = yaml.safe_load(data[start : start + length])
    header["version"] = constants.RECORDING_VERSION + 1
    text = yaml.safe_dump(header, sort_keys=True).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(text)) + text + data[start + length :])

    with pytest.raises(VersionError):
        read_recording(path)


def test_truncation_reports_offset(tmp_path) -> None:
    path = tmp_path / "cut.kfr"
    write_recording(_recording(), path)
    data = path.read_bytes()

    path.write_bytes(data[:-10])
    with pytest.raises(TruncatedFileError) as info:
        read_recording(path)
    assert 0 < info.value.offset < len(data)

    path.write_bytes(data[:3])
    with pytest.raises(TruncatedFileError):
        read_recording(path)


def test_not_a_recording(tmp_path) -> None:
    path = tmp_path / "junk.kfr"
    path.write_bytes(b"hello world, this is not a recording")
    with pytest.raises(SchemaError):
        read_recording(path)


def test_motion_file_roundtrip(tmp_path) -> None:
    motion = generate_motion("walk", 1.0).replace(markers={"calibration_start": 5})
    path = tmp_path / "walk.kfm"
    write_motion(motion, path, "feedbeef")
    back = read_motion(path)

    assert back == motion
    assert back.stance is not None
    common.assert_equal(back.stance, motion.stance)
    assert read_recording(path).config_hash == "feedbeef"


def test_motion_file_without_stance(tmp_path) -> None:
    motion = generate_motion("squat", 0.5)
    path = tmp_path / "squat.kfm"
    write_motion(motion, path)
    back = read_motion(path)

    assert back.stance is None
    assert back == motion


def test_read_motion_rejects_other_files(tmp_path) -> None:
    path = tmp_path / "session.kfr"
    write_recording(_recording(), path)
    with pytest.raises(SchemaError):
        read_motion(path)
