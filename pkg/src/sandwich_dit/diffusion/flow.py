"""Rectified flow: straight-line noising, velocity targets, and an Euler sampler."""

from __future__ import annotations

import numpy as np

from ..numerics import ops
from ..numerics.rng import Rng
from ..numerics.tensor import NonFiniteError, Tensor, no_grad


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _same_shape(a, b, what: str) -> None:
    if tuple(np.shape(_arr(a))) != tuple(np.shape(_arr(b))):
        raise ValueError(f"{what}: shape mismatch {np.shape(_arr(a))} vs {np.shape(_arr(b))}")


def forward_noise(x0, t: float, eps):
    """``x_t = (1 - t) x0 + t eps``. Tensor inputs stay differentiable; arrays give arrays."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep t={t} outside [0, 1]")
    _same_shape(x0, eps, "forward_noise")
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return ops.add(ops.scale(x0, 1.0 - t), ops.scale(eps, t))
    return (1.0 - t) * np.asarray(x0) + t * np.asarray(eps)


def velocity_target(x0, eps):
    return ops.sub(eps, x0) if isinstance(x0, Tensor) or isinstance(eps, Tensor) else np.asarray(eps) - np.asarray(x0)


def fm_loss(pred_v, x0, eps) -> Tensor:
    """Mean squared error of a velocity prediction against ``eps - x0``."""
    _same_shape(pred_v, x0, "fm_loss")
    _same_shape(pred_v, eps, "fm_loss")
    return ops.mse(pred_v, Tensor(_arr(eps) - _arr(x0)))


def kd_loss(student_v, teacher_v) -> Tensor:
    """Mean squared error between student and (cached) teacher velocities."""
    _same_shape(student_v, teacher_v, "kd_loss")
    return ops.mse(student_v, teacher_v)


def euler_flow_sample(model, x_T, steps: int, c_text=None) -> np.ndarray:
    """Integrate ``dx/dt = v`` from t=1 to t=0 on a uniform grid: ``x <- x - dt * v(x, t, c)``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.array(_arr(x_T), dtype=np.float64, copy=True)
    ts = np.linspace(1.0, 0.0, steps + 1)
    with no_grad():
        for t, t_next in zip(ts[:-1], ts[1:]):
            v = _arr(model(x, float(t), c_text))
            x = x - (t - t_next) * v
            if not np.isfinite(x).all():
                raise NonFiniteError(f"sampler state became non-finite at t={t:.4f}")
    return x


def sample_timesteps(rng: Rng, n: int, kind: str = "uniform", mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``n`` timesteps in [0, 1]: uniform, or logit-normal (sigmoid of a normal draw)."""
    if kind == "uniform":
        return rng.uniform((n,))
    if kind == "logit_normal":
        z = rng.normal((n,)) * std + mean
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown timestep sampler {kind!r} (use 'uniform' or 'logit_normal')")


def expert_for(t: float, boundary: float = 0.5) -> str:
    """Which expert owns timestep ``t``: high noise at ``t >= boundary``."""
    return "high" if t >= boundary else "low"
