"""
Constraint-guided full-body pose estimation.

The unknowns are the local rotation vectors of every non-root joint over a window of ``K``
frames; the root pose stays fixed to the anchor. Residual terms:

    direct      world orientation of the bones below the elbows, hips and knees
    relative    pelvis to upper-arm rotation
    temporal    change of each pelvis-relative bone rotation between consecutive frames
    contact     feet below the ground and feet sliding while in contact
    smooth      second differences of the joint rotation vectors
    prior       rotation vectors of joints no tracker observes

Each residual depends on at most three consecutive frames, so the Jacobian is recovered
from ``3 * 63`` forward-mode products over frame-colored seeds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
import torch
from numpy import ndarray
from rich.logging import RichHandler
from torch import Tensor
from torch.func import jvp, vmap

from . import config, constants, so3, tensors
from .calibration import CalibrationResult
from .errors import InvalidConfigError, OptimizationError, WindowError
from .recording import Recording
from .skeleton import MotionSequence, SkeletonModel, default_skeleton
from .tensors import DTYPE
from .tracking import (
    RootAnchor,
    TrackedBones,
    anchor_root,
    detect_contact,
    foot_positions,
    ground_height,
    naive_pose,
    track_recording,
    unwrap_rotvecs,
)

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

TERMS: Tuple[str, ...] = ("direct", "relative", "temporal", "contact", "smooth", "prior")
METHODS: Tuple[str, ...] = ("optimize", "naive")

# Rotation vector coordinates per frame: 21 non-root joints.
_DOF = 3
_MAX_DAMPING = 1e12
# Relative predicted decrease below which a rejected step counts as convergence.
_FLAT = 1e-12


@dataclass(frozen=True)
class GuidanceWeights:
    w_direct: float = 1.0
    w_relative: float = 1.0
    w_temporal: float = 1.0
    w_contact: float = 0.1
    w_smooth: float = 1e-3
    w_prior: float = 1e-2

    def __post_init__(self) -> None:
        values = [float(getattr(self, f"w_{term}")) for term in TERMS]

        if any(not np.isfinite(v) or v < 0 for v in values):
            raise InvalidConfigError(f"guidance weights must be finite and >= 0: {values}")

        if not any(v > 0 for v in values):
            raise InvalidConfigError("at least one guidance weight must be positive")

    def __getitem__(self, term: str) -> float:
        return float(getattr(self, f"w_{term}"))

    def to_dict(self) -> Dict[str, Any]:
        return config.to_dict(self)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> GuidanceWeights:
        return config.from_dict(cls, document, {f"w_{t}": float for t in TERMS})

    def updated(self, text: str) -> GuidanceWeights:
        """
        Overrides weights from ``"k=v,k=v"``. Keys may omit the ``w_`` prefix.
        """

        changes = self.to_dict()
        for item in filter(None, (s.strip() for s in text.split(","))):
            (key, sep, value) = item.partition("=")
            key = key.strip()
            key = key if key.startswith("w_") else f"w_{key}"

            if not sep or key not in changes:
                raise InvalidConfigError(f"bad weight override {item!r}")

            changes[key] = value
        return type(self).from_dict(changes)


class SolveDiagnostics(NamedTuple):
    iterations: int
    converged: bool
    cost: float
    residuals: Dict[str, float]
    history: Tuple[float, ...]


class PoseSolution(NamedTuple):
    motion: MotionSequence
    diagnostics: SolveDiagnostics


@dataclass(frozen=True, eq=False)
class GuidanceWindow:
    """
    Optimizer inputs over ``K`` consecutive frames.

    ``tracked`` holds ``(K, T, 4)`` bone orientations in tracker order ``names`` and
    ``weights`` their ``(K, T)`` staleness weights. ``temporal`` names the trackers the
    temporal term applies to.
    """

    timestamps: ndarray
    names: Tuple[str, ...]
    tracked: ndarray
    weights: ndarray
    root_orientations: ndarray
    root_positions: ndarray
    contact: ndarray
    ground: float
    temporal: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def build(
        cls,
        tracked: TrackedBones,
        init: MotionSequence,
        contact: ndarray | None = None,
        ground: float | None = None,
        temporal: Sequence[str] | None = None,
    ) -> GuidanceWindow:
        if len(tracked) != len(init):
            raise WindowError(
                f"window has {len(tracked)} tracked frames and {len(init)} pose frames"
            )

        if temporal is None:
            temporal = [n for n in tracked.names if n != constants.PELVIS]

        if ground is None:
            ground = ground_height(foot_positions(init)[..., 2], init.timestamps)

        if contact is None:
            contact = detect_contact(init, ground=ground)

        return cls(
            init.timestamps,
            tracked.names,
            np.asarray(tracked.quaternions),
            tracked.weights(),
            init.root_orientations,
            init.root_positions,
            np.asarray(contact, dtype=bool),
            float(ground),
            tuple(temporal),
        )


class Objective:
    """
    Weighted least-squares residuals of one window, as a function of the flattened
    ``(K * 21 * 3,)`` rotation vectors.
    """

    def __init__(
        self,
        window: GuidanceWindow,
        skeleton: SkeletonModel,
        weights: GuidanceWeights,
    ) -> None:
        if len(window) < 2:
            raise WindowError(f"window needs at least 2 frames, got {len(window)}")

        self.window = window
        self.skeleton = skeleton
        self.weights = weights
        self.frames = len(window)
        self.joints = len(skeleton) - 1
        self.width = self.joints * _DOF

        self.parents = [int(p) for p in skeleton.parents]
        self.offsets = tensors.as_tensor(skeleton.offsets)
        self.root = tensors.as_tensor(window.root_orientations)
        self.root_position = tensors.as_tensor(window.root_positions)

        names = window.names
        self.bones = {
            name: (skeleton.bone(name).joint, tensors.as_tensor(skeleton.rest[name].quat))
            for name in names
        }
        self.tracked = tensors.as_tensor(window.tracked)
        self.stale = tensors.as_tensor(window.weights)
        column = {name: i for (i, name) in enumerate(names)}

        def pairs(candidates: Sequence[Tuple[str, str]]) -> List[Tuple[int, int]]:
            return [
                (column[a], column[b])
                for (a, b) in candidates
                if a in column and b in column
            ]

        self.direct = [column[b] for b in constants.DIRECT_BONES if b in column]
        self.relative = pairs(
            [(constants.PELVIS, bone) for bone in constants.SHOULDER_BONES]
        )
        self.temporal = pairs(
            [(constants.PELVIS, b) for b in window.temporal if b != constants.PELVIS]
        )

        observed = {skeleton.bone(n).joint for n in names} - {0}
        self.prior = [j - 1 for j in range(1, len(skeleton)) if j not in observed]
        self.feet = [skeleton.joint_index(n) for n in constants.FOOT_JOINTS]

        contact = np.asarray(window.contact, dtype=bool)
        self.sliding = tensors.as_tensor(contact[1:] & contact[:-1])
        # Frame spacing in seconds.
        spacing = np.maximum(np.diff(window.timestamps), 1) / 1000.0
        self.spacing = tensors.as_tensor(spacing)

        self.active = tuple(t for t in TERMS if self._count(t) > 0 and weights[t] > 0)
        self.spans = self._spans()

    def _count(self, term: str) -> int:
        "Residuals per leading index of ``term``."

        return {
            "direct": len(self.direct) * _DOF,
            "relative": len(self.relative) * _DOF,
            "temporal": len(self.temporal) * _DOF,
            "contact": 2 + (4 if self.frames > 1 else 0),
            "smooth": self.width if self.frames > 2 else 0,
            "prior": len(self.prior) * _DOF,
        }[term]

    def _spans(self) -> Tuple[ndarray, ndarray]:
        "First and last frame each residual row depends on."

        (lo, hi) = ([], [])

        def add(leading: int, count: int, reach: int) -> None:
            first = np.repeat(np.arange(leading), count)
            lo.append(first)
            hi.append(first + reach)

        for term in self.active:
            if term == "temporal":
                add(self.frames - 1, self._count(term), 1)
            elif term == "smooth":
                add(self.frames - 2, self._count(term), 2)
            elif term == "contact":
                add(self.frames, 2, 0)
                add(self.frames - 1, 4, 1)
            else:
                add(self.frames, self._count(term), 0)

        if not lo:
            return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

        return (np.concatenate(lo), np.concatenate(hi))

    def kinematics(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        "World joint orientations ``(K, J, 4)`` and positions ``(K, J, 3)``."

        local = tensors.qexp(x.reshape(self.frames, self.joints, _DOF))
        world = [self.root]
        position = [self.root_position]

        for joint in range(1, len(self.parents)):
            parent = self.parents[joint]
            world.append(tensors.qmul(world[parent], local[:, joint - 1]))
            offset = self.offsets[joint].expand(self.frames, 3)
            position.append(position[parent] + tensors.qrot(world[parent], offset))

        return (torch.stack(world, dim=1), torch.stack(position, dim=1))

    def _bones(self, world: Tensor) -> Tensor:
        "FK orientations ``(K, T, 4)`` of the tracked bones."

        out = []
        for (joint, rest) in self.bones.values():
            out.append(tensors.qmul(world[:, joint], rest.expand(self.frames, 4)))
        return torch.stack(out, dim=1)

    def _direct(self, bones: Tensor, weight: float) -> Tensor:
        scale = math.sqrt(weight) * self.stale[:, self.direct]
        return (
            tensors.relative_log(self.tracked[:, self.direct], bones[:, self.direct])
            * scale[..., None]
        )

    def _pair(self, bones: Tensor, pairs: List[Tuple[int, int]], weight: float) -> Tensor:
        (a, b) = ([p[0] for p in pairs], [p[1] for p in pairs])
        fk = tensors.qmul(tensors.qconj(bones[:, a]), bones[:, b])
        seen = tensors.qmul(tensors.qconj(self.tracked[:, a]), self.tracked[:, b])
        scale = math.sqrt(weight) * self.stale[:, a] * self.stale[:, b]
        return tensors.relative_log(seen, fk) * scale[..., None]

    def _temporal(self, bones: Tensor, weight: float) -> Tensor:
        (a, b) = ([p[0] for p in self.temporal], [p[1] for p in self.temporal])

        def deltas(source: Tensor) -> Tensor:
            relative = tensors.qmul(tensors.qconj(source[:, a]), source[:, b])
            return tensors.qmul(tensors.qconj(relative[:-1]), relative[1:])

        stale = self.stale[:, a] * self.stale[:, b]
        scale = math.sqrt(weight) * stale[:-1] * stale[1:]
        return tensors.relative_log(deltas(self.tracked), deltas(bones)) * scale[..., None]

    def _contact(self, position: Tensor, weight: float) -> Tensor:
        feet = position[:, self.feet]
        below = torch.relu(self.window.ground - feet[..., 2])
        velocity = (feet[1:, :, :2] - feet[:-1, :, :2]) / self.spacing[:, None, None]
        slide = velocity * self.sliding[..., None]
        scale = math.sqrt(weight)
        return torch.cat([below.reshape(-1) * scale, slide.reshape(-1) * scale])

    def terms(self, x: Tensor) -> Dict[str, Tensor]:
        "Flattened weighted residuals of every active term."

        (world, position) = self.kinematics(x)
        bones = self._bones(world)
        angles = x.reshape(self.frames, self.joints, _DOF)
        out = {}

        for term in self.active:
            weight = self.weights[term]

            if term == "direct":
                value = self._direct(bones, weight)
            elif term == "relative":
                value = self._pair(bones, self.relative, weight)
            elif term == "temporal":
                value = self._temporal(bones, weight)
            elif term == "contact":
                value = self._contact(position, weight)
            elif term == "smooth":
                value = (angles[2:] - 2.0 * angles[1:-1] + angles[:-2]) * math.sqrt(weight)
            else:
                value = angles[:, self.prior] * math.sqrt(weight)

            out[term] = value.reshape(-1) if term != "contact" else value

        return out

    def residuals(self, x: Tensor) -> Tensor:
        terms = self.terms(x)
        if not terms:
            return x.new_zeros(0)

        # The contact term stacks its per-frame rows before its per-pair rows.
        return torch.cat([terms[t] for t in self.active])

    def cost(self, x: Tensor) -> float:
        r = self.residuals(x)
        return float(r @ r)

    def breakdown(self, x: Tensor) -> Dict[str, float]:
        terms = self.terms(x)
        return {t: float(terms[t] @ terms[t]) if t in terms else 0.0 for t in TERMS}

    def jacobian(self, x: Tensor) -> Tensor:
        """
        Dense ``(M, K * 63)`` Jacobian of ``residuals`` at ``x``.

        Seed ``(c, d)`` perturbs coordinate ``d`` of every frame ``t`` with
        ``t % 3 == c``. A residual spanning frames ``lo..hi`` (at most three) meets exactly
        one such frame per color, which decompresses the products.
        """

        seeds = torch.zeros(3, self.width, self.frames, self.width, dtype=DTYPE)
        identity = torch.eye(self.width, dtype=DTYPE)
        for frame in range(self.frames):
            seeds[frame % 3, :, frame] = identity
        seeds = seeds.reshape(3 * self.width, -1)

        def product(seed: Tensor) -> Tensor:
            return jvp(self.residuals, (x,), (seed,))[1]

        compressed = vmap(product)(seeds).reshape(3, self.width, -1)

        (lo, hi) = self.spans
        out = torch.zeros(len(lo), self.frames * self.width, dtype=DTYPE)
        for color in range(3):
            frame = lo + (color - lo) % 3
            hit = np.flatnonzero(frame <= hi)
            columns = frame[hit, None] * self.width + np.arange(self.width)
            rows = torch.as_tensor(hit)
            out[rows[:, None], torch.as_tensor(columns)] = compressed[color][:, rows].T

        return out

    def gradient(self, x: Tensor) -> Tensor:
        return 2.0 * self.jacobian(x).T @ self.residuals(x)


def plan_windows(
    frames: int, size: int = constants.WINDOW, overlap: int = constants.OVERLAP
) -> List[Tuple[int, int]]:
    """
    ``[start, end)`` frame ranges of ``size`` frames overlapping by ``overlap``.

    The last window is shifted back to end on the final frame.
    """

    if size < 2:
        raise WindowError(f"window size must be at least 2, got {size}")

    if not 0 <= overlap < size:
        raise WindowError(f"overlap {overlap} must lie in [0, {size})")

    if frames < 2:
        raise WindowError(f"need at least 2 frames, got {frames}")

    if frames <= size:
        return [(0, frames)]

    starts = list(range(0, frames - size + 1, size - overlap))
    if starts[-1] + size < frames:
        starts.append(frames - size)

    return [(s, s + size) for s in starts]


def levenberg_marquardt(
    objective: Objective,
    x0: Tensor,
    max_iterations: int = constants.MAX_ITERATIONS,
    tolerance: float = constants.STEP_TOLERANCE,
) -> Tuple[Tensor, SolveDiagnostics]:
    """
    Damped Gauss-Newton on ``objective`` starting at ``x0``.

    Steps solve ``(J^T J + lambda I) s = -J^T r``; an accepted step divides ``lambda`` by
    10, a rejected one multiplies it by 10. Converges when the step drops below
    ``tolerance`` after an accepted step, or when a rejected step promised no measurable
    decrease. A stall, where the step only shrinks below ``tolerance`` or the damping cap
    is hit through rejections, returns the current iterate with ``converged`` false.

    Raises
    ------

    OptimizationError with the best iterate and per-term residuals after
    ``max_iterations``.
    """

    x = x0.clone()
    r = objective.residuals(x)
    cost = float(r @ r)
    history = [cost]
    damping = 1e-3
    eye = torch.eye(len(x), dtype=DTYPE)

    for iteration in range(max_iterations):
        jacobian = objective.jacobian(x)
        gradient = jacobian.T @ r
        hessian = jacobian.T @ jacobian

        rejected = 0

        while True:
            factor = torch.linalg.cholesky(hessian + damping * eye)
            step = torch.cholesky_solve(-gradient[:, None], factor)[:, 0]

            if float(step.norm()) < tolerance:
                converged = rejected == 0
                if not converged:
                    logger.warning("Stalled after %d rejected steps", rejected)
                return (x, _diagnostics(objective, x, iteration, converged, history))

            candidate = x + step
            trial = objective.residuals(candidate)

            if (trial_cost := float(trial @ trial)) < cost:
                (x, r, cost) = (candidate, trial, trial_cost)
                history.append(cost)
                damping = max(damping / 10.0, 1e-12)
                break

            # The linearized model promises nothing measurable.
            predicted = -float(2.0 * gradient @ step + step @ hessian @ step)
            if predicted <= _FLAT * cost:
                return (x, _diagnostics(objective, x, iteration, True, history))

            damping *= 10.0
            rejected += 1
            if damping > _MAX_DAMPING:
                logger.warning("Damping exceeded %.0e with cost %.6e", _MAX_DAMPING, cost)
                return (x, _diagnostics(objective, x, iteration, False, history))

        logger.debug("iteration %d, cost %.6e, damping %.1e", iteration, cost, damping)

    raise OptimizationError(
        f"no convergence after {max_iterations} iterations (cost {cost:.3e})",
        x.detach().numpy().reshape(objective.frames, objective.joints, _DOF),
        objective.breakdown(x),
    )


def _diagnostics(
    objective: Objective,
    x: Tensor,
    iterations: int,
    converged: bool,
    history: List[float],
) -> SolveDiagnostics:
    return SolveDiagnostics(
        iterations, converged, history[-1], objective.breakdown(x), tuple(history)
    )


def rotvecs(motion: MotionSequence) -> ndarray:
    "``(F, J - 1, 3)`` time-unwrapped rotation vectors of the joint rotations."

    return unwrap_rotvecs(so3.log_quaternions(motion.joint_rotations))


def optimize_pose(
    window: GuidanceWindow,
    skeleton: SkeletonModel,
    weights: GuidanceWeights,
    init: MotionSequence,
    *,
    max_iterations: int = constants.MAX_ITERATIONS,
    tolerance: float = constants.STEP_TOLERANCE,
) -> PoseSolution:
    """
    Minimizes the guidance objective of one window, starting from ``init``.

    Returns
    -------

    The optimized poses with the window's root pose, and solver diagnostics.

    Raises
    ------

    WindowError for fewer than 2 frames, OptimizationError on non-convergence.
    """

    if len(window) < 2:
        raise WindowError(f"window needs at least 2 frames, got {len(window)}")

    objective = Objective(window, skeleton, weights)
    x0 = tensors.as_tensor(rotvecs(init)).reshape(-1)
    (x, diagnostics) = levenberg_marquardt(objective, x0, max_iterations, tolerance)

    angles = x.detach().numpy().reshape(len(window), -1, _DOF)
    motion = init.replace(
        timestamps=window.timestamps,
        root_orientations=window.root_orientations,
        root_positions=window.root_positions,
        joint_rotations=so3.exp_quaternions(angles),
    )
    return PoseSolution(motion, diagnostics)


def optimize_sequence(
    tracked: TrackedBones,
    init: MotionSequence,
    weights: GuidanceWeights,
    *,
    size: int = constants.WINDOW,
    overlap: int = constants.OVERLAP,
    max_iterations: int = constants.MAX_ITERATIONS,
) -> Tuple[MotionSequence, List[SolveDiagnostics]]:
    """
    Runs ``optimize_pose`` over overlapping windows, each warm-started from the previous
    solution on the shared frames. A frame keeps the solution of the last window it
    belongs to.

    Raises
    ------

    OptimizationError from the first window that does not converge, carrying the
    best-so-far sequence as ``motion``.
    """

    skeleton = init.skeleton
    heights = foot_positions(init)[..., 2]
    ground = ground_height(heights, init.timestamps)
    contact = detect_contact(init, ground=ground)

    rotations = np.array(init.joint_rotations)
    report = []

    for (lo, hi) in plan_windows(len(init), size, overlap):
        frames = np.arange(lo, hi)
        seed = init.select(frames).replace(joint_rotations=rotations[lo:hi])
        window = GuidanceWindow.build(tracked.select(frames), seed, contact[lo:hi], ground)

        try:
            solution = optimize_pose(
                window, skeleton, weights, seed, max_iterations=max_iterations
            )
        except OptimizationError as e:
            logger.error("Window %d-%d did not converge: %s", lo, hi, e)
            rotations[lo:hi] = so3.exp_quaternions(e.best)
            e.motion = init.replace(joint_rotations=rotations)
            raise

        rotations[lo:hi] = solution.motion.joint_rotations
        report.append(solution.diagnostics)
        if not solution.diagnostics.converged:
            logger.warning("Window %d-%d stalled short of the step tolerance", lo, hi)

    return (init.replace(joint_rotations=rotations), report)


class Fusion(NamedTuple):
    motion: MotionSequence
    tracked: TrackedBones
    anchor: RootAnchor
    heading: so3.Rotation
    diagnostics: List[SolveDiagnostics]


def fuse(
    recording: Recording,
    calibration: CalibrationResult,
    skeleton: SkeletonModel | None = None,
    weights: GuidanceWeights | None = None,
    *,
    method: str = "optimize",
    max_gap: int = constants.MAX_GAP_MS,
    size: int = constants.WINDOW,
    overlap: int = constants.OVERLAP,
    max_iterations: int = constants.MAX_ITERATIONS,
) -> Fusion:
    """
    The runtime path from a recording to full-body motion.

    IMU streams are synchronized to the SLAM clock, turned into bone orientations,
    rotated into the SLAM world and combined with the head trajectory. ``method="naive"``
    stops at the IMU-only pose; ``"optimize"`` refines it window by window and re-anchors
    the root with the refined head-to-pelvis offsets. Only IMU and SLAM streams are read.

    A window that does not converge within ``max_iterations`` raises OptimizationError.
    """

    if method not in METHODS:
        raise InvalidConfigError(f"unknown fusion method {method!r}, expected {METHODS}")

    skeleton = default_skeleton() if skeleton is None else skeleton
    weights = GuidanceWeights() if weights is None else weights

    (tracked, heading) = track_recording(recording, calibration, skeleton, max_gap)
    slam = recording[constants.SLAM_STREAM]
    anchor = anchor_root(slam, skeleton, tracked)
    motion = naive_pose(tracked, skeleton, anchor)
    diagnostics: List[SolveDiagnostics] = []

    if method == "optimize":
        (motion, diagnostics) = optimize_sequence(
            tracked,
            motion,
            weights,
            size=size,
            overlap=overlap,
            max_iterations=max_iterations,
        )
        anchor = anchor_root(slam, skeleton, tracked, motion)
        motion = motion.replace(root_positions=anchor.pelvis_positions)

    motion = motion.replace(markers=dict(recording.markers))
    logger.info("Fused %d frames with method %s", len(motion), method)
    return Fusion(motion, tracked, anchor, heading, diagnostics)
