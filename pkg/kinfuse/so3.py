"""
Rotation algebra on SO(3).

Rotations are stored as canonical unit quaternions ``(w, x, y, z)``: unit norm, with
the first non-zero component positive, so ``q`` and ``-q`` map to the same value.
Conversions to and from matrices and rotation vectors go through scipy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, List, NamedTuple, Sequence, Tuple

import numpy as np
from numpy import ndarray
from rich.logging import RichHandler
from scipy.spatial.transform import Rotation as ScipyRotation

from . import constants
from .errors import EmptyInputError, KarcherConvergenceError

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

# Axis-angle vector in radians, the tangent-space image of a rotation.
RotationVector = ndarray


def _to_scipy_order(quaternions: ndarray) -> ndarray:
    return quaternions[..., [1, 2, 3, 0]]


def _from_scipy_order(quaternions: ndarray) -> ndarray:
    return quaternions[..., [3, 0, 1, 2]]


def canonicalize(quaternions: ndarray) -> ndarray:
    "Normalizes ``(..., 4)`` quaternions and flips them so the first non-zero entry is positive."

    q = np.asarray(quaternions, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)

    nonzero = q != 0
    first = np.argmax(nonzero, axis=-1)
    lead = np.take_along_axis(q, first[..., None], axis=-1)
    return np.where(lead < 0, -q, q)


def qmul(a: ndarray, b: ndarray) -> ndarray:
    "Hamilton product of ``(..., 4)`` quaternions."

    (aw, ax, ay, az) = np.moveaxis(a, -1, 0)
    (bw, bx, by, bz) = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def qconj(q: ndarray) -> ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qrot(q: ndarray, v: ndarray) -> ndarray:
    "Rotates ``(..., 3)`` vectors by ``(..., 4)`` unit quaternions."

    (w, u) = (q[..., :1], q[..., 1:])
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


@dataclass(frozen=True, eq=False)
class Rotation:
    quat: ndarray

    def __init__(self, quaternion: Sequence[float] | ndarray) -> None:
        q = np.asarray(quaternion, dtype=float)

        if q.shape != (4,):
            raise ValueError(f"Expected a quaternion of shape (4,), got {q.shape}.")

        if not np.all(np.isfinite(q)) or not np.any(q):
            raise ValueError(f"Quaternion {q} does not describe a rotation.")

        q = canonicalize(q)
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls([1.0, 0.0, 0.0, 0.0])

    @classmethod
    def from_quaternion(cls, quaternion: Sequence[float] | ndarray) -> Rotation:
        return cls(quaternion)

    @classmethod
    def from_matrix(cls, matrix: ndarray) -> Rotation:
        quat = ScipyRotation.from_matrix(np.asarray(matrix, dtype=float)).as_quat()
        return cls(_from_scipy_order(quat))

    @classmethod
    def from_rotvec(cls, vector: Sequence[float] | ndarray) -> Rotation:
        quat = ScipyRotation.from_rotvec(np.asarray(vector, dtype=float)).as_quat()
        return cls(_from_scipy_order(quat))

    @classmethod
    def about_axis(cls, axis: Sequence[float] | ndarray, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        max_angle: float | None = None,
        base: Rotation | None = None,
    ) -> Rotation:
        """
        Draws a random rotation.

        Without ``max_angle`` the draw is uniform (Haar) over SO(3). With it, the result
        lies within ``max_angle`` radians of ``base`` (identity by default): a uniform axis
        and an angle drawn uniformly in ``[0, max_angle]``.
        """

        if max_angle is None:
            drawn = cls(rng.standard_normal(4))
        else:
            axis = rng.standard_normal(3)
            drawn = cls.about_axis(axis, rng.uniform(0.0, max_angle))

        if base is None:
            return drawn

        return base @ drawn

    def quaternion(self) -> ndarray:
        return self.quat.copy()

    def matrix(self) -> ndarray:
        return ScipyRotation.from_quat(_to_scipy_order(self.quat)).as_matrix()

    def rotvec(self) -> RotationVector:
        return log(self)

    def angle(self) -> float:
        return 2.0 * float(np.arctan2(np.linalg.norm(self.quat[1:]), abs(self.quat[0])))

    def inverse(self) -> Rotation:
        return Rotation(qconj(self.quat))

    def apply(self, vector: ndarray) -> ndarray:
        return self.matrix() @ np.asarray(vector, dtype=float)

    def __matmul__(self, other: Rotation) -> Rotation:
        return compose(self, other)

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, Rotation):
            return NotImplemented

        return bool(
            np.allclose(self.quat, other.quat, rtol=0.0, atol=1e-12)
            or np.allclose(self.quat, -other.quat, rtol=0.0, atol=1e-12)
        )

    __hash__ = None  # type: ignore

    def __repr__(self) -> str:
        (w, x, y, z) = self.quat
        return f"Rotation(w={w:.9f}, x={x:.9f}, y={y:.9f}, z={z:.9f})"


def as_quaternions(rotations: Sequence[Rotation]) -> ndarray:
    if len(rotations) == 0:
        return np.zeros((0, 4))

    return np.stack([r.quat for r in rotations])


def from_quaternions(quaternions: ndarray) -> List[Rotation]:
    return [Rotation(q) for q in np.asarray(quaternions, dtype=float)]


def compose(a: Rotation, b: Rotation) -> Rotation:
    "The frame transform ``a`` followed by ``b``, i.e. the product ``a b``."

    return Rotation(qmul(a.quat, b.quat))


def inverse(r: Rotation) -> Rotation:
    return r.inverse()


def log(r: Rotation) -> RotationVector:
    "Principal-branch logarithm, angle in ``[0, pi]``. See ``branch_ambiguous``."

    return log_quaternions(r.quat)


def exp(vector: RotationVector | Sequence[float]) -> Rotation:
    return Rotation.from_rotvec(vector)


def log_quaternions(quaternions: ndarray) -> ndarray:
    "Batched principal logarithm of ``(..., 4)`` quaternions."

    q = np.asarray(quaternions, dtype=float)
    rotvec = ScipyRotation.from_quat(_to_scipy_order(q.reshape(-1, 4))).as_rotvec()
    return rotvec.reshape(q.shape[:-1] + (3,))


def exp_quaternions(vectors: ndarray) -> ndarray:
    v = np.asarray(vectors, dtype=float)
    quat = ScipyRotation.from_rotvec(v.reshape(-1, 3)).as_quat()
    return canonicalize(_from_scipy_order(quat)).reshape(v.shape[:-1] + (4,))


def branch_ambiguous(r: Rotation, tolerance: float = constants.BRANCH_TOLERANCE) -> bool:
    "True when the angle is within ``tolerance`` of pi, where the axis sign is unreliable."

    return r.angle() > np.pi - tolerance


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    return float(distances(a.quat, b.quat))


def distances(a: ndarray, b: ndarray) -> ndarray:
    "Batched geodesic distance between ``(..., 4)`` quaternion arrays."

    relative = qmul(qconj(np.asarray(a, dtype=float)), np.asarray(b, dtype=float))
    return 2.0 * np.arctan2(
        np.linalg.norm(relative[..., 1:], axis=-1), np.abs(relative[..., 0])
    )


class KarcherDiagnostics(NamedTuple):
    iterations: int
    gradient_norm: float
    max_residual: float
    samples: int
    trimmed: int


class KarcherResult(NamedTuple):
    mean: Rotation
    diagnostics: KarcherDiagnostics


def _weights(weights: Sequence[float] | ndarray | None, count: int) -> ndarray:
    if weights is None:
        return np.ones(count)

    w = np.asarray(weights, dtype=float)

    if w.shape != (count,):
        raise EmptyInputError(f"expected {count} weights, got shape {w.shape}")

    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise EmptyInputError("weights must be finite and nonnegative")

    if w.sum() <= 0:
        raise EmptyInputError("weights must have a positive sum")

    return w


def _medoid(quaternions: ndarray, weights: ndarray) -> ndarray:
    dots = np.clip(np.abs(quaternions @ quaternions.T), 0.0, 1.0)
    summed = (2.0 * np.arccos(dots)) @ weights
    return quaternions[int(np.argmin(summed))]


def _tangent_mean(mean: ndarray, quaternions: ndarray, weights: ndarray) -> ndarray:
    logs = log_quaternions(qmul(qconj(mean)[None, :], quaternions))
    return weights @ logs / weights.sum()


def _average(
    quaternions: ndarray,
    weights: ndarray,
    start: ndarray,
    max_iterations: int,
    tolerance: float,
) -> Tuple[ndarray, int, float]:
    mean = start
    best = (mean, np.inf)

    for iteration in range(max_iterations):
        step = _tangent_mean(mean, quaternions, weights)
        gradient_norm = 2.0 * weights.sum() * float(np.linalg.norm(step))
        logger.debug("karcher iteration %d, gradient norm %.3e", iteration, gradient_norm)

        if gradient_norm < best[1]:
            best = (mean, gradient_norm)

        if np.linalg.norm(step) < tolerance:
            return (mean, iteration, gradient_norm)

        mean = canonicalize(qmul(mean, exp_quaternions(step)))

    raise KarcherConvergenceError(Rotation(best[0]), best[1], max_iterations)


def karcher_mean(
    samples: Sequence[Rotation],
    weights: Sequence[float] | ndarray | None = None,
    *,
    trim: bool = False,
    trim_threshold: float = constants.TRIM_THRESHOLD_RAD,
    max_iterations: int = constants.KARCHER_MAX_ITERATIONS,
    tolerance: float = constants.KARCHER_TOLERANCE,
) -> KarcherResult:
    """
    Weighted barycenter of rotations under the geodesic distance.

    Fixed-point tangent-space averaging ``R <- R exp(sum w_j log(R^T R_j) / sum w_j)``,
    started at the sample with the least summed distance to all others, converged when the
    step is below ``tolerance`` radians.

    Parameters
    ----------

    trim:
        Run one extra pass that drops samples farther than ``trim_threshold`` from the
        first mean and averages the rest again.

    Returns
    -------

    The mean and its diagnostics.

    Raises
    ------

    EmptyInputError if there are no samples or the weights are invalid,
    KarcherConvergenceError carrying the best iterate after ``max_iterations``.
    """

    if len(samples) == 0:
        raise EmptyInputError("karcher mean of an empty sample set")

    quaternions = as_quaternions(samples)
    w = _weights(weights, len(samples))

    (mean, iterations, gradient_norm) = _average(
        quaternions, w, _medoid(quaternions, w), max_iterations, tolerance
    )

    trimmed = 0
    if trim:
        keep = distances(mean[None, :], quaternions) <= trim_threshold
        if not keep.any():
            logger.warning("Trim pass would drop every sample. Skipping it.")
        elif not keep.all():
            trimmed = int((~keep).sum())
            logger.info("Trimming %d of %d samples.", trimmed, len(keep))
            (quaternions, w) = (quaternions[keep], w[keep])
            (mean, more, gradient_norm) = _average(
                quaternions, w, mean, max_iterations, tolerance
            )
            iterations += more

    residual = float(distances(mean[None, :], quaternions).max())
    diagnostics = KarcherDiagnostics(
        iterations, gradient_norm, residual, len(quaternions), trimmed
    )
    return KarcherResult(Rotation(mean), diagnostics)


def karcher_cost(
    r: Rotation,
    samples: Sequence[Rotation],
    weights: Sequence[float] | ndarray | None = None,
) -> float:
    w = _weights(weights, len(samples))
    d = distances(r.quat[None, :], as_quaternions(samples))
    return float(w @ (d * d))


def karcher_gradient(
    r: Rotation,
    samples: Sequence[Rotation],
    weights: Sequence[float] | ndarray | None = None,
) -> ndarray:
    "Gradient of ``karcher_cost`` at ``r`` along body-frame perturbations ``r exp(e)``."

    w = _weights(weights, len(samples))
    logs = log_quaternions(qmul(qconj(r.quat)[None, :], as_quaternions(samples)))
    return -2.0 * (w @ logs)


def yaw_project(
    r: Rotation, gravity_axis: Sequence[float] | ndarray = constants.GRAVITY_AXIS
) -> Rotation:
    """
    The rotation about ``gravity_axis`` closest to ``r`` in geodesic distance.

    This is the twist part of a swing-twist split. When ``r`` is a half turn about an axis
    orthogonal to gravity every yaw is equally close; identity is returned then and
    ``yaw_ambiguous`` reports it.
    """

    g = np.asarray(gravity_axis, dtype=float)
    (w, v) = (r.quat[0], r.quat[1:])
    p = float(v @ g)

    if np.hypot(w, p) < constants.YAW_TOLERANCE:
        logger.debug("Yaw projection of %s is ambiguous.", r)
        return Rotation.identity()

    return Rotation(np.concatenate([[w], p * g]))


def yaw_ambiguous(
    r: Rotation, gravity_axis: Sequence[float] | ndarray = constants.GRAVITY_AXIS
) -> bool:
    g = np.asarray(gravity_axis, dtype=float)
    return bool(np.hypot(r.quat[0], r.quat[1:] @ g) < constants.YAW_TOLERANCE)


def yaw_angle(
    r: Rotation, gravity_axis: Sequence[float] | ndarray = constants.GRAVITY_AXIS
) -> float:
    "Signed angle of ``yaw_project(r)`` about ``gravity_axis``, in ``(-pi, pi]``."

    g = np.asarray(gravity_axis, dtype=float)
    twist = yaw_project(r, g).quat
    return float(2.0 * np.arctan2(twist[1:] @ g, twist[0]))


def tilt_angle(
    r: Rotation, gravity_axis: Sequence[float] | ndarray = constants.GRAVITY_AXIS
) -> float:
    return geodesic_distance(yaw_project(r, gravity_axis), r)
