import logging
import warnings

import numpy as np
import torch
from rich.logging import RichHandler
from torch.func import jacfwd

from kinfuse import so3, tensors
from kinfuse.tensors import DTYPE

from . import common


def test_qmul_matches_numpy() -> None:
    rng = np.random.default_rng(0)
    a = common.random_quaternions(rng, 20)
    b = common.random_quaternions(rng, 20)
    out = tensors.qmul(torch.tensor(a, dtype=DTYPE), torch.tensor(b, dtype=DTYPE))
    common.assert_isclose(out.numpy(), so3.qmul(a, b), 1e-12)


def test_qrot_matches_numpy() -> None:
    rng = np.random.default_rng(1)
    q = common.random_quaternions(rng, 20)
    v = rng.standard_normal((20, 3))
    out = tensors.qrot(torch.tensor(q, dtype=DTYPE), torch.tensor(v, dtype=DTYPE))
    common.assert_isclose(out.numpy(), so3.qrot(q, v), 1e-12)


def test_exp_log_match_numpy() -> None:
    rng = np.random.default_rng(2)
    v = rng.standard_normal((30, 3))
    v = v / np.linalg.norm(v, axis=-1, keepdims=True) * rng.uniform(0, 3.0, (30, 1))

    q = tensors.qexp(torch.tensor(v, dtype=DTYPE))
    common.assert_isclose(so3.canonicalize(q.numpy()), so3.exp_quaternions(v), 1e-12)
    common.assert_isclose(tensors.qlog(q).numpy(), v, 1e-10)


def test_small_angles() -> None:
    v = torch.tensor([[1e-10, -2e-10, 0.5e-10], [0.0, 0.0, 0.0]], dtype=DTYPE)
    common.assert_isclose(tensors.qlog(tensors.qexp(v)), v, 1e-15)


def test_derivatives_finite_at_identity() -> None:
    zero = torch.zeros(3, dtype=DTYPE)
    jacobian = jacfwd(lambda v: tensors.qlog(tensors.qexp(v)))(zero)
    assert torch.isfinite(jacobian).all()
    common.assert_isclose(jacobian, torch.eye(3, dtype=DTYPE), 1e-12)


def test_relative_log() -> None:
    a = so3.Rotation.about_axis([0.0, 0.0, 1.0], 0.3)
    b = so3.Rotation.about_axis([0.0, 0.0, 1.0], 0.8)
    out = tensors.relative_log(
        torch.tensor(a.quat, dtype=DTYPE), torch.tensor(b.quat, dtype=DTYPE)
    )
    common.assert_isclose(out.numpy(), np.array([0.0, 0.0, 0.5]), 1e-12)


def test_as_tensor_copies_read_only_arrays() -> None:
    source = np.arange(12, dtype=float).reshape(3, 4)
    source.flags.writeable = False

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = tensors.as_tensor(source)

    assert out.dtype == DTYPE
    out[0, 0] = 100.0
    common.assert_equal(source[0, 0], 0.0)
    common.assert_isclose(tensors.as_tensor([[1, 2]]).numpy(), np.array([[1.0, 2.0]]), 0.0)


def test_logger() -> None:
    assert tensors.logger.name == "kinfuse.tensors"
    assert isinstance(tensors.logger, logging.Logger)
    assert any(isinstance(h, RichHandler) for h in tensors.logger.handlers)
