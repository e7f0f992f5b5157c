"""Relativistic pairwise GAN objectives with perturbation-difference R1/R2 penalties."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..numerics import ops
from ..numerics.rng import Rng
from ..numerics.tensor import Tensor


def rpgan_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """``L_D = mean softplus(-(r - f))`` and ``L_G = mean softplus(r - f)`` over paired scores."""
    r = d_real if isinstance(d_real, Tensor) else Tensor(d_real)
    f = d_fake if isinstance(d_fake, Tensor) else Tensor(d_fake)
    if r.shape != f.shape:
        raise ValueError(f"paired scores need equal lengths, got {r.shape} and {f.shape}")
    diff = ops.sub(r, f)
    return ops.mean(ops.softplus(ops.scale(diff, -1.0))), ops.mean(ops.softplus(diff))


def unit_directions(rng: Rng, shape: tuple[int, ...]) -> np.ndarray:
    """One random unit-norm direction per sample (leading axis) of ``shape``."""
    d = rng.normal(shape)
    flat = d.reshape(shape[0], -1)
    return (flat / np.linalg.norm(flat, axis=1, keepdims=True)).reshape(shape)


def r_penalties(D: Callable, x_real, x_fake, eps_r: float, gamma: float, rng: Rng,
                directions=None) -> tuple[Tensor, Tensor]:
    """``R = (gamma/2) (1/eps_r) mean[D(x + delta) - D(x)]`` on real (R1) and fake (R2) batches.

    ``delta`` is a unit direction per sample scaled to norm ``eps_r``; pass ``directions``
    (``{"real": arr, "fake": arr}`` of unit vectors) to fix them, otherwise they are drawn from
    ``rng``. ``D`` maps a ``[B, ...]`` batch to ``[B]`` scores.
    """
    if eps_r <= 0:
        raise ValueError(f"eps_r must be positive, got {eps_r}")

    def penalty(x, key):
        x = x if isinstance(x, Tensor) else Tensor(x)
        u = directions[key] if directions is not None else unit_directions(rng, x.shape)
        shifted = ops.add(x, Tensor(np.asarray(u) * eps_r))
        diff = ops.sub(D(shifted), D(x))
        return ops.scale(ops.mean(diff), 0.5 * gamma / eps_r)

    return penalty(x_real, "real"), penalty(x_fake, "fake")
