"""
Recording files: a versioned YAML header followed by length-prefixed binary records.

Layout (all integers little-endian)::

    b"KFREC\\n"                      6-byte magic
    u32 header_length
    header_length bytes of YAML:    version, skeleton_version, config_hash, markers,
                                    metadata, streams [{id, kind, count, ...}]
    records until end of file:
        u32 record_length           bytes that follow, stream index included
        u8  stream_index            position in the header's stream list
        payload                     fixed layout per stream kind

Payload layouts:

    rotation    i64 timestamp, f64 w x y z
    head_pose   i64 timestamp, f64 w x y z, f64 px py pz
    motion      i64 timestamp, f64 root px py pz, f64 root w x y z,
                f64 w x y z per non-root joint, [u8 stance bits]
    tracked     i64 timestamp, f64 w x y z, f64 staleness_ms

Records are ordered by timestamp, then stream index. Motion files and tracked-bone files
use the same container.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Tuple

import numpy as np
import yaml
from rich.logging import RichHandler

from . import constants
from .errors import RecordingError, SchemaError, TruncatedFileError, VersionError
from .interfaces import HeadPose, Stream, TimedSample, TrackedSample
from .skeleton import MotionSequence, PoseFrame, SkeletonModel, default_skeleton
from .so3 import Rotation

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

MAGIC = b"KFREC\n"
_U32 = struct.Struct("<I")
_INDEX = struct.Struct("<B")

MOTION_STREAM = "motion"


@dataclass(frozen=True, eq=False)
class Recording:
    streams: Dict[str, Stream]
    markers: Dict[str, int] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    skeleton_version: int = constants.SKELETON_VERSION
    config_hash: str = ""
    version: int = constants.RECORDING_VERSION

    def __getitem__(self, stream_id: str) -> Stream:
        return self.streams[stream_id]

    def __contains__(self, stream_id: str) -> bool:
        return stream_id in self.streams

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented

        return (
            self.header() == other.header()
            and list(self.streams) == list(other.streams)
            and all(self.streams[k] == other.streams[k] for k in self.streams)
        )

    __hash__ = None  # type: ignore

    def header(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "skeleton_version": self.skeleton_version,
            "config_hash": self.config_hash,
            "markers": dict(self.markers),
            "metadata": dict(self.metadata),
        }


class _Layout:
    "Fixed-size binary layout of one stream kind."

    def __init__(
        self,
        fmt: str,
        encode: Callable[[TimedSample], Tuple[Any, ...]],
        decode: Callable[[Tuple[Any, ...]], Any],
    ) -> None:
        self.struct = struct.Struct(fmt)
        self.encode = encode
        self.decode = decode

    def pack(self, sample: TimedSample) -> bytes:
        return self.struct.pack(sample.timestamp, *self.encode(sample))

    def unpack(self, buffer: bytes, source: str) -> TimedSample:
        values = self.struct.unpack(buffer)
        return TimedSample(int(values[0]), self.decode(values[1:]), source)


def _rotation_layout() -> _Layout:
    return _Layout(
        "<q4d", lambda s: tuple(s.payload.quat), lambda v: Rotation(np.array(v))
    )


def _head_pose_layout() -> _Layout:
    return _Layout(
        "<q7d",
        lambda s: (*s.payload.rotation.quat, *s.payload.position),
        lambda v: HeadPose(Rotation(np.array(v[:4])), np.array(v[4:])),
    )


def _tracked_layout() -> _Layout:
    return _Layout(
        "<q5d",
        lambda s: (*s.payload.rotation.quat, s.payload.staleness),
        lambda v: TrackedSample(Rotation(np.array(v[:4])), float(v[4])),
    )


def _motion_layout(joints: int, stance: bool) -> _Layout:
    count = 7 + 4 * (joints - 1)

    def encode(sample: TimedSample) -> Tuple[Any, ...]:
        (frame, bits) = sample.payload if stance else (sample.payload, None)
        values = (
            *frame.root_position,
            *frame.root_orientation.quat,
            *frame.joint_quaternions().ravel(),
        )
        return values if bits is None else (*values, bits)

    def decode(values: Tuple[Any, ...]) -> Any:
        quats = np.array(values[7:count]).reshape(joints - 1, 4)
        frame = PoseFrame(
            0,
            Rotation(np.array(values[3:7])),
            np.array(values[:3]),
            tuple(Rotation(q) for q in quats),
        )
        return (frame, values[count]) if stance else frame

    return _Layout(f"<q{count}d" + ("B" if stance else ""), encode, decode)


def _layout(descriptor: Mapping[str, Any]) -> _Layout:
    kind = descriptor["kind"]

    if kind == "rotation":
        return _rotation_layout()

    if kind == "head_pose":
        return _head_pose_layout()

    if kind == "tracked":
        return _tracked_layout()

    if kind == "motion":
        return _motion_layout(int(descriptor["joints"]), bool(descriptor["stance"]))

    raise SchemaError(f"unknown stream kind {kind!r}")


def _descriptor(stream: Stream) -> Dict[str, Any]:
    descriptor: Dict[str, Any] = {
        "id": stream.id,
        "kind": stream.kind,
        "count": len(stream),
    }

    if stream.kind == "motion":
        first = stream[0].payload if len(stream) else None
        stance = isinstance(first, tuple)
        frame = first[0] if stance else first
        descriptor["joints"] = 1 + (len(frame.joints) if frame is not None else 0)
        descriptor["stance"] = stance

    return descriptor


def write_recording(recording: Recording, path: str | Path) -> None:
    streams = list(recording.streams.values())

    if len(streams) > 255:
        raise SchemaError(f"too many streams ({len(streams)})")

    header = recording.header()
    header["streams"] = [_descriptor(s) for s in streams]
    text = yaml.safe_dump(header, sort_keys=True).encode()

    layouts = [_layout(d) for d in header["streams"]]
    order = sorted(
        (sample.timestamp, index, position)
        for (index, stream) in enumerate(streams)
        for (position, sample) in enumerate(stream)
    )

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_U32.pack(len(text)))
        f.write(text)

        for (_, index, position) in order:
            payload = layouts[index].pack(streams[index][position])
            f.write(_U32.pack(len(payload) + 1))
            f.write(_INDEX.pack(index))
            f.write(payload)

    logger.debug("Wrote %d records to %s", len(order), path)


def _read_header(data: bytes) -> Tuple[Dict[str, Any], int]:
    if not data.startswith(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedFileError(len(data))
        raise SchemaError("not a recording file")

    offset = len(MAGIC)
    if len(data) < offset + _U32.size:
        raise TruncatedFileError(offset)

    (length,) = _U32.unpack_from(data, offset)
    if len(data) < offset + _U32.size + length:
        raise TruncatedFileError(offset)

    start = offset + _U32.size
    try:
        header = yaml.safe_load(data[start : start + length])
    except yaml.YAMLError as e:
        raise SchemaError(f"unreadable header: {e}") from e

    if not isinstance(header, dict) or not isinstance(header.get("version"), int):
        raise SchemaError("header has no integer version")

    if header["version"] != constants.RECORDING_VERSION:
        raise VersionError(
            f"file version {header['version']},"
            f" supported version {constants.RECORDING_VERSION}"
        )

    streams = header.get("streams")
    if not isinstance(streams, list) or not all(
        isinstance(s, dict) and {"id", "kind", "count"} <= set(s) for s in streams
    ):
        raise SchemaError("header has no valid stream table")

    for key in ("markers", "metadata"):
        if not isinstance(header.setdefault(key, {}), dict):
            raise SchemaError(f"header field {key!r} must be a mapping")

    return (header, start + length)


def read_recording(path: str | Path) -> Recording:
    """
    Reads a recording written by ``write_recording``.

    The header is validated before any record is decoded, so a version mismatch loads
    nothing.

    Raises
    ------

    RecordingError when the file cannot be read, VersionError, TruncatedFileError (with
    the byte offset of the broken record) or SchemaError.
    """

    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise RecordingError(f"cannot read {path}: {e.strerror}") from e

    (header, offset) = _read_header(data)

    descriptors = header["streams"]
    try:
        layouts = [_layout(d) for d in descriptors]
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad stream descriptor: {e!r}") from e

    samples: List[List[TimedSample]] = [[] for _ in descriptors]

    while offset < len(data):
        if len(data) < offset + _U32.size:
            raise TruncatedFileError(offset)

        (length,) = _U32.unpack_from(data, offset)
        end = offset + _U32.size + length
        if len(data) < end:
            raise TruncatedFileError(offset)

        if length < 1:
            raise SchemaError(f"empty record at byte offset {offset}")

        index = data[offset + _U32.size]
        if index >= len(descriptors):
            raise SchemaError(f"record at byte offset {offset} names stream {index}")

        layout = layouts[index]
        payload = data[offset + _U32.size + 1 : end]
        if len(payload) != layout.struct.size:
            raise SchemaError(
                f"record at byte offset {offset} has {len(payload)} payload bytes,"
                f" stream kind needs {layout.struct.size}"
            )

        try:
            samples[index].append(layout.unpack(payload, descriptors[index]["id"]))
        except ValueError as e:
            raise SchemaError(f"record at byte offset {offset}: {e}") from e

        offset = end

    streams = {}
    for (descriptor, found) in zip(descriptors, samples):
        if len(found) < descriptor["count"]:
            raise TruncatedFileError(len(data))

        if len(found) > descriptor["count"]:
            raise SchemaError(f"stream {descriptor['id']!r} has extra records")

        try:
            streams[descriptor["id"]] = Stream(
                descriptor["id"], descriptor["kind"], tuple(found)
            )
        except ValueError as e:
            raise SchemaError(str(e)) from e

    return Recording(
        streams,
        {str(k): int(v) for (k, v) in header["markers"].items()},
        header["metadata"],
        int(header.get("skeleton_version", constants.SKELETON_VERSION)),
        str(header.get("config_hash", "")),
        header["version"],
    )


def _stance_bits(stance: np.ndarray) -> int:
    return 4 | int(stance[0]) | int(stance[1]) << 1


def write_motion(motion: MotionSequence, path: str | Path, config_hash: str = "") -> None:
    frames = motion.frames

    if motion.stance is not None:
        payloads = [(f, _stance_bits(s)) for (f, s) in zip(frames, motion.stance)]
    else:
        payloads = list(frames)

    stream = Stream.of(MOTION_STREAM, "motion", motion.timestamps, payloads)
    recording = Recording(
        {MOTION_STREAM: stream},
        motion.markers,
        {"rate": float(motion.rate), "joints": len(motion.skeleton)},
        motion.skeleton.version,
        config_hash,
    )
    write_recording(recording, path)


def read_motion(path: str | Path, skeleton: SkeletonModel | None = None) -> MotionSequence:
    if skeleton is None:
        skeleton = default_skeleton()

    recording = read_recording(path)

    if MOTION_STREAM not in recording:
        raise SchemaError(f"{path} holds no motion stream")

    if recording.skeleton_version != skeleton.version:
        raise SchemaError(
            f"motion uses skeleton version {recording.skeleton_version},"
            f" expected {skeleton.version}"
        )

    stream = recording[MOTION_STREAM]
    payloads = stream.payloads()
    stance = None

    if payloads and isinstance(payloads[0], tuple):
        stance = np.array([[bits & 1, bits >> 1 & 1] for (_, bits) in payloads], bool)
        payloads = tuple(frame for (frame, _) in payloads)

    frames = [
        PoseFrame(int(t), f.root_orientation, f.root_position, f.joints)
        for (t, f) in zip(stream.timestamps, payloads)
    ]

    try:
        rate = float(recording.metadata["rate"])
        return MotionSequence.from_frames(
            skeleton, frames, rate, stance, recording.markers
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed motion file: {e!r}") from e
