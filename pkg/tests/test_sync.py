import time

import numpy as np
import pytest

from kinfuse.errors import DuplicateStreamError, EmptyStreamError
from kinfuse.interfaces import Stream
from kinfuse.so3 import Rotation
from kinfuse.sync import nearest_indices, synchronize

from . import common


def _stream(id: str, times) -> Stream:
    return Stream.of(id, "rotation", times, [Rotation.identity()] * len(times))


def _brute_force(reference, times):
    "Smallest |gap|, then the earliest sample, then the first of equal timestamps."

    out = []
    for r in reference:
        if not len(times):
            out.append((-1, 0))
            continue
        best = min(range(len(times)), key=lambda i: (abs(times[i] - r), times[i], i))
        out.append((best, times[best] - r))
    return out


def test_nearest_matches_brute_force() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        reference = np.sort(rng.integers(0, 500, rng.integers(1, 30)))
        times = np.sort(rng.integers(0, 500, rng.integers(0, 30)))
        assert nearest_indices(reference, times) == _brute_force(
            list(reference), list(times)
        )


def test_ties_and_duplicates() -> None:
    common.call(
        lambda reference, times, expected: common.assert_equal(
            nearest_indices(reference, times), expected
        ),
        [
            [[15], [10, 20], [(0, -5)]],
            [[20], [10, 20, 20, 30], [(1, 0)]],
            [[26], [10, 20, 20, 30], [(3, 4)]],
            [[25], [10, 20, 20, 30], [(1, -5)]],
            [[0, 100], [50], [(0, 50), (0, -50)]],
        ],
    )


def test_synchronize_entries() -> None:
    frames = synchronize(
        [_stream("b", [0, 33, 66]), _stream("a", [1, 40, 200]), _stream("e", [])],
        "b",
        max_gap=20,
    )

    assert [f.timestamp for f in frames] == [0, 33, 66]
    assert list(frames[0].entries) == ["a", "b", "e"]

    common.assert_equal([f.entries["a"].gap for f in frames], [1, 7, -26])
    common.assert_equal([f.valid("a") for f in frames], [True, True, False])
    assert frames[2].entries["a"].sample is None
    assert frames[1].payload("a") == Rotation.identity()

    empty = frames[0].entries["e"]
    assert (empty.sample, empty.gap, empty.valid) == (None, None, False)
    assert all(f.valid("b") and f.entries["b"].gap == 0 for f in frames)


def test_synchronize_is_order_free() -> None:
    streams = [_stream("x", [0, 10, 20]), _stream("y", [3, 12]), _stream("z", [9])]
    a = synchronize(streams, "x")
    b = synchronize(streams[::-1], "x")
    assert a == b


def test_synchronize_gap_bound() -> None:
    rng = np.random.default_rng(1)
    reference = _stream("ref", np.sort(rng.integers(0, 10_000, 100)))
    other = _stream("other", np.sort(rng.integers(0, 10_000, 50)))

    for frame in synchronize([reference, other], "ref", max_gap=30):
        entry = frame.entries["other"]
        assert entry.valid == (abs(entry.gap) <= 30)


def test_synchronize_errors() -> None:
    with pytest.raises(EmptyStreamError):
        synchronize([_stream("a", [1])], "b")
    with pytest.raises(EmptyStreamError):
        synchronize([_stream("a", [])], "a")
    with pytest.raises(DuplicateStreamError):
        synchronize([_stream("a", [1]), _stream("a", [2])], "a")


def test_nearest_scales_linearly() -> None:
    rng = np.random.default_rng(7)

    def best_time(count: int) -> float:
        reference = np.cumsum(rng.integers(1, 40, count))
        times = np.sort(rng.integers(0, int(reference[-1]), count))
        elapsed = []
        for _ in range(5):
            start = time.perf_counter()
            nearest_indices(reference, times)
            elapsed.append(time.perf_counter() - start)
        return min(elapsed)

    (small, large) = (best_time(10_000), best_time(100_000))

    # Per-sample cost may grow by at most 2x over a tenfold longer input.
    assert large / 100_000 < 2.0 * small / 10_000
