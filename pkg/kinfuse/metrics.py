"""
Evaluation metrics and reports.

MPJPE is measured in world coordinates without any alignment. JAE compares parent to child
joint directions after moving both skeletons to an identity root pose, so it ignores the
global pose entirely.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy import ndarray
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import constants
from .errors import VersionError, ZeroValidPairsError
from .skeleton import MotionSequence, world_positions, world_quaternions
from .sync import nearest_indices

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

COLUMNS: Tuple[str, ...] = (
    "dataset",
    "clip",
    "frames",
    "total_frames",
    "excluded_frames",
    "mpjpe_cm",
    "jae_deg",
    "recall",
)
ALL = "*"

Interval = Tuple[int, int]


class Alignment(NamedTuple):
    """
    Frame pairs between a prediction and the truth on the ``reference`` clock.

    Reference frames inside an exclusion interval are dropped and counted in ``excluded``.
    Indices of invalid pairs are -1.
    """

    reference: str
    timestamps: ndarray
    pred_indices: ndarray
    truth_indices: ndarray
    valid: ndarray
    excluded: int = 0

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def frames(self) -> int:
        return int(self.valid.sum())


def calibration_exclusions(motion: MotionSequence) -> List[Interval]:
    "The calibration segment of ``motion``, if its markers are present."

    markers = motion.markers
    if constants.CALIBRATION_START in markers and constants.CALIBRATION_END in markers:
        return [(markers[constants.CALIBRATION_START], markers[constants.CALIBRATION_END])]

    return []


def _excluded(timestamps: ndarray, exclusions: Sequence[Interval]) -> ndarray:
    mask = np.zeros(len(timestamps), dtype=bool)
    for (start, end) in exclusions:
        mask |= (timestamps >= start) & (timestamps <= end)
    return mask


def align_motions(
    pred: MotionSequence,
    truth: MotionSequence,
    max_gap: int = constants.MAX_GAP_MS,
    reference: str = "pred",
    exclusions: Sequence[Interval] = (),
) -> Alignment:
    """
    Pairs every reference frame with the nearest frame of the other motion.

    A pair is valid when the two timestamps are at most ``max_gap`` ms apart.
    """

    if reference not in ("pred", "truth"):
        raise ValueError(f"Reference must be 'pred' or 'truth', got {reference!r}.")

    (ref, other) = (pred, truth) if reference == "pred" else (truth, pred)
    drop = _excluded(ref.timestamps, exclusions)
    kept = np.flatnonzero(~drop)
    stamps = ref.timestamps[kept]

    matched = nearest_indices(stamps, other.timestamps)
    indices = np.array([i for (i, _) in matched], dtype=np.int64).reshape(-1)
    gaps = np.array([g for (_, g) in matched], dtype=np.int64).reshape(-1)
    valid = (indices >= 0) & (np.abs(gaps) <= max_gap)
    indices = np.where(valid, indices, -1)
    own = np.where(valid, kept, -1)

    if reference == "pred":
        (pred_indices, truth_indices) = (own, indices)
    else:
        (pred_indices, truth_indices) = (indices, own)
    return Alignment(
        reference, stamps, pred_indices, truth_indices, valid, int(drop.sum())
    )


def _pairs(alignment: Alignment) -> Tuple[ndarray, ndarray]:
    if alignment.frames == 0:
        raise ZeroValidPairsError("no valid frame pairs to evaluate")

    return (
        alignment.pred_indices[alignment.valid],
        alignment.truth_indices[alignment.valid],
    )


def _joints(motion: MotionSequence, indices: ndarray, normalized: bool = False) -> ndarray:
    skeleton = motion.skeleton
    count = len(indices)

    if normalized:
        roots = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
        origins = np.zeros((count, 3))
    else:
        roots = motion.root_orientations[indices]
        origins = motion.root_positions[indices]

    world = world_quaternions(skeleton, roots, motion.joint_rotations[indices])
    return world_positions(skeleton, world, origins)


def mpjpe(pred: MotionSequence, truth: MotionSequence, alignment: Alignment) -> float:
    """
    Mean per-joint position error in cm over the valid pairs and all joints.

    Raises
    ------

    ZeroValidPairsError when no pair is valid.
    """

    (p, t) = _pairs(alignment)
    distances = np.linalg.norm(_joints(pred, p) - _joints(truth, t), axis=-1)
    return float(distances.mean() * 100.0)


def _edges(motion: MotionSequence) -> List[Tuple[int, int]]:
    skeleton = motion.skeleton
    edges = []

    for (parent, child) in skeleton.edges():
        if np.linalg.norm(skeleton.offsets[child]) == 0:
            logger.warning(
                "Skipping zero-length bone %s -> %s in JAE.",
                skeleton.joints[parent].name,
                skeleton.joints[child].name,
            )
            continue
        edges.append((parent, child))

    return edges


def jae(pred: MotionSequence, truth: MotionSequence, alignment: Alignment) -> float:
    """
    Mean angle in degrees between predicted and true parent to child joint directions,
    both computed with the root at identity.

    Raises
    ------

    ZeroValidPairsError when no pair is valid or every bone has zero length.
    """

    (p, t) = _pairs(alignment)
    edges = _edges(pred)

    if not edges:
        raise ZeroValidPairsError("skeleton has no bone of nonzero length")

    (parents, children) = (
        [e[0] for e in edges],
        [e[1] for e in edges],
    )
    a = _joints(pred, p, True)
    b = _joints(truth, t, True)
    u = a[:, children] - a[:, parents]
    v = b[:, children] - b[:, parents]

    angles = np.arctan2(
        np.linalg.norm(np.cross(u, v), axis=-1), np.einsum("...i,...i", u, v)
    )
    return float(np.rad2deg(angles).mean())


def recall(alignment: Alignment) -> float:
    "Fraction of evaluation frames with a valid prediction; 0 for an empty clip."

    if len(alignment) == 0:
        logger.warning("Recall of an empty clip is defined as 0.")
        return 0.0

    return float(alignment.valid.mean())


class Clip(NamedTuple):
    name: str
    pred: MotionSequence
    truth: MotionSequence
    dataset: str = "default"


def _weighted(rows: pd.DataFrame, column: str, weight: str) -> float:
    total = rows[weight].sum()
    if total == 0:
        return 0.0

    return float((rows[column] * rows[weight]).sum() / total)


def _aggregate(rows: pd.DataFrame, dataset: str) -> Dict[str, object]:
    return {
        "dataset": dataset,
        "clip": ALL,
        "frames": int(rows["frames"].sum()),
        "total_frames": int(rows["total_frames"].sum()),
        "excluded_frames": int(rows["excluded_frames"].sum()),
        "mpjpe_cm": _weighted(rows, "mpjpe_cm", "frames"),
        "jae_deg": _weighted(rows, "jae_deg", "frames"),
        "recall": _weighted(rows, "recall", "total_frames"),
    }


@dataclass(frozen=True, eq=False)
class EvalReport:
    """
    Per-clip, per-dataset and overall metrics.

    Aggregate rows carry ``clip == "*"`` (and ``dataset == "*"`` for the overall row).
    MPJPE and JAE aggregate weighted by valid frames, recall by evaluation frames.
    """

    table: pd.DataFrame
    version: int = constants.REPORT_VERSION

    @property
    def clips(self) -> pd.DataFrame:
        return self.table[self.table["clip"] != ALL]

    @property
    def overall(self) -> pd.Series:
        rows = self.table[(self.table["dataset"] == ALL) & (self.table["clip"] == ALL)]
        return rows.iloc[0]

    def dataset(self, name: str) -> pd.Series:
        rows = self.table[(self.table["dataset"] == name) & (self.table["clip"] == ALL)]
        return rows.iloc[0]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        buffer.write(f"# version: {self.version}\n")
        self.table.to_csv(buffer, index=False, float_format="%.6f")
        return buffer.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def summary(self) -> Table:
        table = Table(title="Evaluation")
        for column in COLUMNS:
            justify = "left" if column in ("dataset", "clip") else "right"
            table.add_column(column, justify=justify)

        for row in self.table.itertuples(index=False):
            table.add_row(
                row.dataset,
                row.clip,
                str(row.frames),
                str(row.total_frames),
                str(row.excluded_frames),
                f"{row.mpjpe_cm:.3f}",
                f"{row.jae_deg:.3f}",
                f"{row.recall:.3f}",
            )
        return table

    def render(self, width: int = 120) -> str:
        console = Console(record=True, width=width, file=io.StringIO())
        console.print(self.summary())
        return console.export_text()


def build_report(
    clips: Sequence[Clip],
    *,
    exclusions: Sequence[Interval] | None = None,
    max_gap: int = constants.MAX_GAP_MS,
    reference: str = "pred",
) -> EvalReport:
    """
    Evaluates every clip.

    Without explicit ``exclusions`` each clip excludes the calibration segment recorded in
    its truth markers.

    Raises
    ------

    ZeroValidPairsError when a clip has no valid pair after exclusions.
    """

    rows = []
    for clip in clips:
        skipped = calibration_exclusions(clip.truth) if exclusions is None else exclusions
        alignment = align_motions(clip.pred, clip.truth, max_gap, reference, skipped)
        rows.append(
            {
                "dataset": clip.dataset,
                "clip": clip.name,
                "frames": alignment.frames,
                "total_frames": len(alignment),
                "excluded_frames": alignment.excluded,
                "mpjpe_cm": mpjpe(clip.pred, clip.truth, alignment),
                "jae_deg": jae(clip.pred, clip.truth, alignment),
                "recall": recall(alignment),
            }
        )
        logger.debug("Evaluated clip %s: %s", clip.name, rows[-1])

    table = pd.DataFrame(rows, columns=list(COLUMNS))
    aggregates = [
        _aggregate(table[table["dataset"] == name], name)
        for name in sorted(set(table["dataset"]))
    ]
    aggregates.append(_aggregate(table, ALL))

    full = pd.concat([table, pd.DataFrame(aggregates, columns=list(COLUMNS))])
    return EvalReport(full.reset_index(drop=True))


def read_report(path: str | Path) -> pd.DataFrame:
    text = Path(path).read_text()
    first = text.splitlines()[0] if text else ""

    if first != f"# version: {constants.REPORT_VERSION}":
        raise VersionError(f"{path} is not a version {constants.REPORT_VERSION} report")

    return pd.read_csv(io.StringIO(text), comment="#", keep_default_na=False)
