"""
Tracker packet wire format.

Little-endian, 24 bytes::

    offset  size  field
    0       2     magic 0xA7 0x51
    2       1     tracker id (0-15)
    3       1     battery level (0-100)
    4       2     sequence number, wraps at 2**16
    6       8     sample timestamp, UTC ms
    14      8     quaternion w, x, y, z as Q15 signed 16-bit
    22      2     CRC-16/CCITT-FALSE over bytes 0-21
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np
from rich.logging import RichHandler

from . import constants
from .errors import (
    BadMagicError,
    ChecksumError,
    MalformedPacketError,
    ShortBufferError,
)
from .interfaces import Stream, TimedSample
from .so3 import Rotation

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

_BODY = struct.Struct("<2sBBHQ4h")
_CRC = struct.Struct("<H")


def crc16_ccitt(data: bytes, poly: int = 0x1021, init: int = 0xFFFF) -> int:
    crc = init
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = (crc << 1) ^ poly
            else:
                crc <<= 1
            crc &= 0xFFFF
    return crc


@dataclass(frozen=True)
class TrackerPacket:
    tracker_id: int
    sequence: int
    timestamp: int
    quaternion: Tuple[float, float, float, float]
    battery: int

    def rotation(self) -> Rotation:
        return Rotation(self.quaternion)

    def to_sample(self, source: str = "") -> TimedSample[Rotation]:
        return TimedSample(self.timestamp, self.rotation(), source)

    @classmethod
    def from_sample(
        cls,
        sample: TimedSample[Rotation],
        tracker_id: int,
        sequence: int,
        battery: int = 100,
    ) -> TrackerPacket:
        quaternion = tuple(float(x) for x in sample.payload.quat)
        return cls(tracker_id, sequence % 2 ** 16, sample.timestamp, quaternion, battery)


def _q15(value: float) -> int:
    return int(np.clip(round(value * constants.Q15_SCALE), -32768, 32767))


def encode_packet(packet: TrackerPacket) -> bytes:
    if not 0 <= packet.tracker_id < 16:
        raise MalformedPacketError(f"tracker id {packet.tracker_id} outside 0-15")

    if not 0 <= packet.battery <= 100:
        raise MalformedPacketError(f"battery level {packet.battery} outside 0-100")

    if not 0 <= packet.timestamp < 2 ** 64:
        raise MalformedPacketError(f"timestamp {packet.timestamp} does not fit 64 bits")

    if len(packet.quaternion) != 4:
        raise MalformedPacketError("quaternion needs 4 components")

    body = _BODY.pack(
        constants.PACKET_MAGIC,
        packet.tracker_id,
        packet.battery,
        packet.sequence & 0xFFFF,
        packet.timestamp,
        *(_q15(x) for x in packet.quaternion),
    )
    return body + _CRC.pack(crc16_ccitt(body))


def decode_packet(buffer: bytes) -> TrackerPacket:
    """
    Parses the first 24 bytes of ``buffer``.

    Raises
    ------

    ShortBufferError, BadMagicError, ChecksumError or MalformedPacketError. No other
    exception escapes for any input bytes.
    """

    if len(buffer) < constants.PACKET_SIZE:
        raise ShortBufferError(
            f"need {constants.PACKET_SIZE} bytes, got {len(buffer)}"
        )

    data = bytes(buffer[: constants.PACKET_SIZE])
    (magic, tracker_id, battery, sequence, timestamp, *q15) = _BODY.unpack_from(data)

    if magic != constants.PACKET_MAGIC:
        raise BadMagicError(f"bad magic {magic.hex()}")

    (expected,) = _CRC.unpack_from(data, _BODY.size)
    if (actual := crc16_ccitt(data[: _BODY.size])) != expected:
        raise ChecksumError(f"checksum {actual:#06x} does not match {expected:#06x}")

    if tracker_id >= 16:
        raise MalformedPacketError(f"tracker id {tracker_id} outside 0-15")

    if battery > 100:
        raise MalformedPacketError(f"battery level {battery} outside 0-100")

    quaternion = tuple(x / constants.Q15_SCALE for x in q15)
    norm = float(np.linalg.norm(quaternion))
    if abs(norm - 1.0) > constants.QUATERNION_NORM_TOLERANCE:
        raise MalformedPacketError(f"quaternion norm {norm:.4f} is not unit")

    return TrackerPacket(tracker_id, sequence, timestamp, quaternion, battery)


def iter_packets(buffer: bytes) -> Iterator[TrackerPacket]:
    """
    Decodes a byte stream of back-to-back packets, skipping to the next magic on damage.
    """

    offset = 0
    while offset + constants.PACKET_SIZE <= len(buffer):
        try:
            yield decode_packet(buffer[offset:])
            offset += constants.PACKET_SIZE
        except (BadMagicError, ChecksumError, MalformedPacketError) as e:
            logger.debug("Dropping bytes at offset %d: %s", offset, e)
            found = buffer.find(constants.PACKET_MAGIC, offset + 1)
            if found < 0:
                return
            offset = found


def transmit(stream: Stream[Rotation], tracker_id: int) -> Stream[Rotation]:
    "Sends ``stream`` over the wire and returns what the receiver decodes."

    wire = b"".join(
        encode_packet(TrackerPacket.from_sample(sample, tracker_id, sequence))
        for (sequence, sample) in enumerate(stream)
    )
    samples = tuple(packet.to_sample(stream.id) for packet in iter_packets(wire))
    return Stream(stream.id, stream.kind, samples)
