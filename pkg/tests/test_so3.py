import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from kinfuse import so3
from kinfuse.errors import EmptyInputError, KarcherConvergenceError
from kinfuse.so3 import Rotation

from . import common


def test_canonical_form() -> None:
    common.call(
        lambda q, c: common.assert_isclose(Rotation(q).quat, np.array(c)),
        [
            [[-1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
            [[0.0, -2.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            [[0.0, 0.0, -1.0, 1.0], [0.0, 0.0, np.sqrt(0.5), -np.sqrt(0.5)]],
        ],
    )


def test_bad_quaternions() -> None:
    for bad in ([0.0, 0.0, 0.0, 0.0], [np.nan, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0]):
        with pytest.raises(ValueError):
            Rotation(bad)


def test_equality_ignores_sign() -> None:
    q = np.array([0.5, 0.5, -0.5, 0.5])
    assert Rotation(q) == Rotation(-q)
    assert Rotation(q) != Rotation.identity()


def test_compose_matches_matrices() -> None:
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = Rotation.random(rng)
        b = Rotation.random(rng)
        common.assert_isclose((a @ b).matrix(), a.matrix() @ b.matrix(), 1e-12)


def test_qrot_matches_matrix() -> None:
    rng = np.random.default_rng(1)
    q = common.random_quaternions(rng, 50)
    v = rng.standard_normal((50, 3))
    expected = np.stack([Rotation(a).matrix() @ b for (a, b) in zip(q, v)])
    common.assert_isclose(so3.qrot(q, v), expected, 1e-12)


def test_inverse() -> None:
    rng = np.random.default_rng(2)
    r = Rotation.random(rng)
    common.assert_rotation_close(r @ r.inverse(), Rotation.identity(), 1e-7)


def test_log_exp_principal_branch() -> None:
    rng = np.random.default_rng(3)
    for _ in range(20):
        r = Rotation.random(rng)
        v = so3.log(r)
        assert np.linalg.norm(v) <= np.pi + 1e-12
        assert so3.exp(v) == r or common.angle_between(so3.exp(v), r) < 1e-7


def test_log_matches_scipy() -> None:
    rng = np.random.default_rng(4)
    q = common.random_quaternions(rng, 30)
    expected = ScipyRotation.from_quat(q[:, [1, 2, 3, 0]]).as_rotvec()
    common.assert_isclose(so3.log_quaternions(q), expected, 1e-12)


def test_branch_ambiguous() -> None:
    assert so3.branch_ambiguous(Rotation.about_axis([0.0, 1.0, 0.0], np.pi))
    assert not so3.branch_ambiguous(Rotation.about_axis([0.0, 1.0, 0.0], 3.0))


def test_distances() -> None:
    common.call(
        lambda a, b, c: common.assert_isclose(so3.geodesic_distance(a, b), c, 1e-12),
        [
            [Rotation.identity(), Rotation.about_axis([1, 0, 0], 0.3), 0.3],
            [Rotation.about_axis([0, 0, 1], 3.0), Rotation.about_axis([0, 0, 1], -3.0), 2 * np.pi - 6.0],
            [Rotation.about_axis([0, 1, 0], 1.0), Rotation.about_axis([0, 1, 0], 1.0), 0.0],
        ],
    )


def test_random_within_angle() -> None:
    rng = np.random.default_rng(5)
    base = Rotation.random(rng)
    for _ in range(50):
        r = Rotation.random(rng, 0.2, base)
        assert so3.geodesic_distance(base, r) <= 0.2 + 1e-12


def test_karcher_single_sample() -> None:
    r = Rotation.about_axis([1.0, 2.0, 3.0], 1.1)
    result = so3.karcher_mean([r])
    common.assert_rotation_close(result.mean, r, 1e-7)
    assert result.diagnostics.samples == 1


def test_karcher_symmetric_pair() -> None:
    a = Rotation.about_axis([0.0, 0.0, 1.0], 0.4)
    b = Rotation.about_axis([0.0, 0.0, 1.0], -0.4)
    common.assert_rotation_close(so3.karcher_mean([a, b]).mean, Rotation.identity(), 1e-7)


def test_karcher_weighted() -> None:
    a = Rotation.identity()
    b = Rotation.about_axis([1.0, 0.0, 0.0], 0.9)
    mean = so3.karcher_mean([a, b], [1.0, 2.0]).mean
    common.assert_rotation_close(mean, Rotation.about_axis([1.0, 0.0, 0.0], 0.6), 1e-7)


def test_karcher_gradient_vanishes() -> None:
    rng = np.random.default_rng(6)
    base = Rotation.random(rng)
    samples = [Rotation.random(rng, 0.5, base) for _ in range(40)]
    result = so3.karcher_mean(samples)
    assert np.linalg.norm(so3.karcher_gradient(result.mean, samples)) < 1e-7


def test_karcher_is_a_minimum() -> None:
    rng = np.random.default_rng(7)
    base = Rotation.random(rng)
    samples = [Rotation.random(rng, 0.6, base) for _ in range(25)]
    mean = so3.karcher_mean(samples).mean
    cost = so3.karcher_cost(mean, samples)

    for _ in range(30):
        nearby = mean @ so3.exp(rng.standard_normal(3) * 1e-3)
        assert so3.karcher_cost(nearby, samples) >= cost - 1e-12


def test_karcher_gradient_finite_differences() -> None:
    rng = np.random.default_rng(8)
    samples = [Rotation.random(rng, 0.8) for _ in range(10)]
    r = Rotation.random(rng, 0.3)
    gradient = so3.karcher_gradient(r, samples)

    h = 1e-6
    numeric = np.zeros(3)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        plus = so3.karcher_cost(r @ so3.exp(e), samples)
        minus = so3.karcher_cost(r @ so3.exp(-e), samples)
        numeric[axis] = (plus - minus) / (2 * h)

    common.assert_isclose(gradient, numeric, 1e-5)


def test_karcher_trim_drops_outliers() -> None:
    rng = np.random.default_rng(9)
    truth = Rotation.random(rng)
    samples = [Rotation.random(rng, 0.02, truth) for _ in range(40)]
    samples += [Rotation.random(rng) for _ in range(4)]

    result = so3.karcher_mean(samples, trim=True)
    assert result.diagnostics.trimmed >= 1
    assert so3.geodesic_distance(result.mean, truth) < 0.02


def test_karcher_errors() -> None:
    with pytest.raises(EmptyInputError):
        so3.karcher_mean([])

    with pytest.raises(EmptyInputError):
        so3.karcher_mean([Rotation.identity()], [-1.0])

    rng = np.random.default_rng(10)
    samples = [Rotation.random(rng) for _ in range(20)]
    with pytest.raises(KarcherConvergenceError) as info:
        so3.karcher_mean(samples, max_iterations=1, tolerance=0.0)
    assert isinstance(info.value.best, Rotation)


def test_yaw_project() -> None:
    yaw = Rotation.about_axis([0.0, 0.0, 1.0], 0.7)
    tilt = Rotation.about_axis([1.0, 0.0, 0.0], 0.2)
    common.assert_rotation_close(so3.yaw_project(yaw), yaw, 1e-7)
    common.assert_isclose(so3.yaw_angle(yaw @ tilt), 0.7, 1e-12)
    common.assert_isclose(so3.tilt_angle(yaw @ tilt), 0.2, 1e-9)


def test_yaw_project_is_closest() -> None:
    rng = np.random.default_rng(11)
    for _ in range(10):
        r = Rotation.random(rng)
        best = so3.geodesic_distance(so3.yaw_project(r), r)
        grid = np.linspace(-np.pi, np.pi, 721)
        brute = min(
            so3.geodesic_distance(Rotation.about_axis([0, 0, 1], a), r) for a in grid
        )
        assert best <= brute + 1e-9


def test_yaw_ambiguous() -> None:
    flip = Rotation.about_axis([1.0, 0.0, 0.0], np.pi)
    assert so3.yaw_ambiguous(flip)
    assert so3.yaw_project(flip) == Rotation.identity()
    assert not so3.yaw_ambiguous(Rotation.about_axis([1.0, 0.0, 0.0], 1.0))


def test_distance_is_a_metric() -> None:
    rng = np.random.default_rng(12)
    (a, b, c) = (common.random_quaternions(rng, 200) for _ in range(3))

    common.assert_isclose(so3.distances(a, b), so3.distances(b, a), 1e-9)
    assert np.all(so3.distances(a, c) <= so3.distances(a, b) + so3.distances(b, c) + 1e-9)
    common.assert_isclose(so3.distances(a, a), np.zeros(len(a)), 1e-7)


def test_exp_log_roundtrip() -> None:
    rng = np.random.default_rng(13)
    axes = rng.standard_normal((500, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    angles = rng.uniform(0.0, np.pi - 1e-3, 500)
    vectors = axes * angles[:, None]

    common.assert_isclose(so3.log_quaternions(so3.exp_quaternions(vectors)), vectors, 1e-9)


def test_karcher_left_equivariant() -> None:
    rng = np.random.default_rng(14)
    for _ in range(5):
        base = Rotation.random(rng)
        samples = [Rotation.random(rng, np.deg2rad(60.0), base) for _ in range(20)]
        q = Rotation.random(rng)

        moved = so3.karcher_mean([q @ s for s in samples]).mean
        common.assert_rotation_close(moved, q @ so3.karcher_mean(samples).mean, 1e-8)


def _karcher_grid_search(samples, center: Rotation) -> Rotation:
    "Coarse tangent grid around ``center``, then a shrinking coordinate search."

    targets = np.stack([s.quat for s in samples])

    def cost(vectors):
        candidates = so3.qmul(center.quat[None, :], so3.exp_quaternions(vectors))
        angles = common.angle_between(candidates[:, None, :], targets[None, :, :])
        return np.sum(angles**2, axis=-1)

    axis = np.arange(-0.6, 0.6 + 1e-9, 0.1)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    best = grid[np.argmin(cost(grid))]
    value = float(cost(best[None])[0])

    steps = np.concatenate([np.eye(3), -np.eye(3)])
    h = 0.05
    while h > 1e-10:
        moves = best[None, :] + h * steps
        values = cost(moves)
        if values.min() < value:
            (best, value) = (moves[np.argmin(values)], float(values.min()))
        else:
            h /= 2.0

    return center @ so3.exp(best)


def test_karcher_matches_grid_search() -> None:
    rng = np.random.default_rng(15)
    for _ in range(5):
        base = Rotation.random(rng)
        samples = [Rotation.random(rng, np.deg2rad(30.0), base) for _ in range(5)]

        expected = _karcher_grid_search(samples, base)
        common.assert_rotation_close(so3.karcher_mean(samples).mean, expected, 1e-6)
