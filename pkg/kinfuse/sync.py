"""
Nearest-neighbour alignment of multi-rate streams onto a reference clock.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Sequence, Tuple

from numpy import ndarray
from rich.logging import RichHandler

from . import constants
from .errors import DuplicateStreamError, EmptyStreamError
from .interfaces import AlignedEntry, AlignedFrame, Stream

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())


def _run_starts(times: List[int]) -> List[int]:
    "For each index, the first index holding the same timestamp."

    starts = []
    for (index, t) in enumerate(times):
        if index > 0 and t == times[index - 1]:
            starts.append(starts[-1])
        else:
            starts.append(index)
    return starts


def nearest_indices(
    reference: Sequence[int] | ndarray, times: Sequence[int] | ndarray
) -> List[Tuple[int, int]]:
    """
    Two-pointer nearest-neighbour match of sorted ``times`` against sorted ``reference``.

    Returns
    -------

    For every reference time, ``(index, gap)`` where ``gap = times[index] - reference``.
    Ties go to the earlier sample, and among equal timestamps to the first one.
    Index is -1 when ``times`` is empty.
    """

    ref = [int(t) for t in reference]
    ts = [int(t) for t in times]

    if not ts:
        return [(-1, 0) for _ in ref]

    starts = _run_starts(ts)
    out = []
    after = 0

    for r in ref:
        while after < len(ts) and ts[after] < r:
            after += 1

        if after == 0:
            out.append((0, ts[0] - r))
        elif after == len(ts) or r - ts[after - 1] <= ts[after] - r:
            before = starts[after - 1]
            out.append((before, ts[before] - r))
        else:
            out.append((after, ts[after] - r))

    return out


def synchronize(
    streams: Sequence[Stream],
    reference: str,
    max_gap: int = constants.MAX_GAP_MS,
) -> List[AlignedFrame]:
    """
    One aligned frame per reference sample, with every stream's nearest sample.

    Entries are keyed by stream id in sorted order, so the result does not depend on the
    order of ``streams``. An entry whose ``|gap|`` exceeds ``max_gap`` ms is invalid and
    carries no sample, only the gap. Streams with no samples give invalid entries with no
    gap.

    Raises
    ------

    EmptyStreamError when the reference stream is missing or empty,
    DuplicateStreamError when two streams share an id.
    """

    by_id: Dict[str, Stream] = {}
    for stream in streams:
        if stream.id in by_id:
            raise DuplicateStreamError(f"stream {stream.id!r} given twice")
        by_id[stream.id] = stream

    if reference not in by_id:
        raise EmptyStreamError(f"no reference stream {reference!r}")

    ref = by_id[reference]
    if len(ref) == 0:
        raise EmptyStreamError(f"reference stream {reference!r} is empty")

    columns: Dict[str, List[AlignedEntry]] = {}
    for sid in sorted(by_id):
        stream = by_id[sid]
        entries = []
        for (index, gap) in nearest_indices(ref.timestamps, stream.timestamps):
            if index < 0:
                entries.append(AlignedEntry(None, None, False))
            elif abs(gap) > max_gap:
                entries.append(AlignedEntry(None, gap, False))
            else:
                entries.append(AlignedEntry(stream[index], gap, True))
        columns[sid] = entries

        if (invalid := sum(not e.valid for e in entries)) and sid != reference:
            logger.debug("%s: %d of %d frames unmatched", sid, invalid, len(entries))

    return [
        AlignedFrame(
            int(t), {sid: column[frame] for (sid, column) in columns.items()}
        )
        for (frame, t) in enumerate(ref.timestamps)
    ]
