"""
Batched quaternion algebra on torch tensors.

Quaternions are ``(..., 4)`` tensors in ``(w, x, y, z)`` order. Every function is free of
data-dependent control flow, so it composes with ``torch.func.jvp`` and ``torch.func.vmap``.
Small-angle branches are selected with ``torch.where`` on safe inputs, keeping derivatives
finite at the identity.
"""

from __future__ import annotations

import logging
from typing import Any

import numpy as np
import torch
from rich.logging import RichHandler
from torch import Tensor

logger = logging.getLogger(__name__)
logger.addHandler(RichHandler())

DTYPE = torch.float64

# Squared angle below which series expansions replace the closed forms.
SMALL = 1e-16


def as_tensor(value: Any) -> Tensor:
    "A writable float64 copy of ``value``. The source array is never shared."

    array = np.array(value, dtype=float)
    if isinstance(value, np.ndarray) and not value.flags.writeable:
        logger.debug("Copying read-only array of shape %s", value.shape)

    return torch.tensor(array, dtype=DTYPE)


def qmul(a: Tensor, b: Tensor) -> Tensor:
    (aw, ax, ay, az) = a.unbind(-1)
    (bw, bx, by, bz) = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def qconj(q: Tensor) -> Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def qrot(q: Tensor, v: Tensor) -> Tensor:
    "Rotates ``(..., 3)`` vectors by unit quaternions."

    (w, u) = (q[..., :1], q[..., 1:])
    t = 2.0 * torch.cross(u, v, dim=-1)
    return v + w * t + torch.cross(u, t, dim=-1)


def qexp(v: Tensor) -> Tensor:
    "Rotation vectors to unit quaternions."

    theta2 = (v * v).sum(-1, keepdim=True)
    small = theta2 < SMALL
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))

    w = torch.where(small, 1.0 - theta2 / 8.0, torch.cos(theta / 2.0))
    s = torch.where(small, 0.5 - theta2 / 48.0, torch.sin(theta / 2.0) / theta)
    return torch.cat([w, s * v], dim=-1)


def qlog(q: Tensor) -> Tensor:
    "Unit quaternions to principal rotation vectors, angle in ``[0, pi]``."

    q = torch.where(q[..., :1] < 0, -q, q)
    (w, u) = (q[..., :1], q[..., 1:])

    n2 = (u * u).sum(-1, keepdim=True)
    small = n2 < SMALL
    n = torch.sqrt(torch.where(small, torch.ones_like(n2), n2))
    safe_w = torch.where(small, w, torch.ones_like(w))

    factor = torch.where(
        small,
        2.0 / safe_w * (1.0 - n2 / (3.0 * safe_w * safe_w)),
        2.0 * torch.atan2(n, w) / n,
    )
    return factor * u


def relative_log(a: Tensor, b: Tensor) -> Tensor:
    "``log(a^T b)``, the tangent residual between two orientations."

    return qlog(qmul(qconj(a), b))
