from __future__ import annotations

from abc import abstractmethod
from dataclasses import dataclass, field
from typing import (
    Any,
    Dict,
    Generic,
    Iterator,
    NamedTuple,
    Protocol,
    Sequence,
    Tuple,
    TypeVar,
    runtime_checkable,
)

import numpy as np
from numpy import ndarray

from .so3 import Rotation

T = TypeVar("T")
P = TypeVar("P", covariant=True)


@dataclass(frozen=True)
class TimedSample(Generic[T]):
    "A payload stamped with a UTC time in milliseconds."

    timestamp: int
    payload: T
    source: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.timestamp, (int, np.integer)) or self.timestamp < 0:
            raise ValueError(f"Invalid timestamp {self.timestamp!r}.")


@dataclass(frozen=True, eq=False)
class HeadPose:
    "A 6-DoF pose: orientation and position (meters) in the SLAM world frame."

    rotation: Rotation
    position: ndarray

    def __post_init__(self) -> None:
        position = np.asarray(self.position, dtype=float)

        if position.shape != (3,) or not np.all(np.isfinite(position)):
            raise ValueError(f"Invalid position {position}.")

        position.setflags(write=False)
        object.__setattr__(self, "position", position)

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, HeadPose):
            return NotImplemented

        return self.rotation == other.rotation and bool(
            np.array_equal(self.position, other.position)
        )

    __hash__ = None  # type: ignore


class TrackedSample(NamedTuple):
    "A tracked bone orientation and the age (ms) of the IMU reading behind it."

    rotation: Rotation
    staleness: float


# Payload kinds a stream may carry. Recordings store them under these names.
STREAM_KINDS: Tuple[str, ...] = ("rotation", "head_pose", "motion", "tracked")


@dataclass(frozen=True)
class Stream(Generic[T]):
    """
    A time-ordered sequence of samples from one source.

    Timestamps are non-decreasing. Equal timestamps are allowed and keep their order.
    """

    id: str
    kind: str
    samples: Tuple[TimedSample[T], ...]
    timestamps: ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in STREAM_KINDS:
            raise ValueError(f"Unknown stream kind {self.kind!r}.")

        samples = tuple(self.samples)
        times = np.array([s.timestamp for s in samples], dtype=np.int64)

        if np.any(np.diff(times) < 0):
            raise ValueError(f"Stream {self.id!r} is not time-ordered.")

        times.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "timestamps", times)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[TimedSample[T]]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> TimedSample[T]:
        return self.samples[index]

    def payloads(self) -> Tuple[T, ...]:
        return tuple(s.payload for s in self.samples)

    def between(self, start: int, end: int) -> Stream[T]:
        "Samples with ``start <= timestamp <= end``."

        lo = int(np.searchsorted(self.timestamps, start, side="left"))
        hi = int(np.searchsorted(self.timestamps, end, side="right"))
        return Stream(self.id, self.kind, self.samples[lo:hi])

    @classmethod
    def of(
        cls, id: str, kind: str, timestamps: Sequence[int], payloads: Sequence[T]
    ) -> Stream[T]:
        samples = tuple(
            TimedSample(int(t), p, id) for (t, p) in zip(timestamps, payloads)
        )
        return cls(id, kind, samples)


@dataclass(frozen=True)
class AlignedEntry(Generic[T]):
    "One stream's contribution to an aligned frame. Invalid entries carry no sample."

    sample: TimedSample[T] | None
    gap: int | None
    valid: bool

    @property
    def payload(self) -> T | None:
        if self.sample is None:
            return None

        return self.sample.payload


@dataclass(frozen=True)
class AlignedFrame:
    timestamp: int
    entries: Dict[str, AlignedEntry]

    def valid(self, stream_id: str) -> bool:
        return (entry := self.entries.get(stream_id)) is not None and entry.valid

    def payload(self, stream_id: str) -> Any:
        if not self.valid(stream_id):
            return None

        return self.entries[stream_id].payload


@runtime_checkable
class Streamable(Protocol[P]):
    @abstractmethod
    def to_stream(self, id: str) -> Stream[P]:
        ...
