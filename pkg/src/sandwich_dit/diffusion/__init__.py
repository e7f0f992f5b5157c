"""Rectified-flow losses, cached distillation, adversarial objectives and an Euler sampler."""

from .adversarial import r_penalties, rpgan_losses, unit_directions
from .flow import euler_flow_sample, expert_for, fm_loss, forward_noise, kd_loss, sample_timesteps, velocity_target
from .kd import (
    CacheFormatError,
    DiffusionTuple,
    DistillResult,
    KdCacheWriter,
    build_kd_cache,
    distill,
    evaluate_kd,
    iter_kd_cache,
    kd_loss_two_expert,
    read_kd_cache,
    velocity_fn,
)

__all__ = [
    "r_penalties", "rpgan_losses", "unit_directions", "euler_flow_sample", "expert_for", "fm_loss",
    "forward_noise", "kd_loss", "sample_timesteps", "velocity_target", "CacheFormatError", "DiffusionTuple",
    "DistillResult", "KdCacheWriter", "build_kd_cache", "distill", "evaluate_kd", "iter_kd_cache",
    "kd_loss_two_expert", "read_kd_cache", "velocity_fn",
]
