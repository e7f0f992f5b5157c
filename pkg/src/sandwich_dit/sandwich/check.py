"""Finite-difference check through one routed sandwich segment (LCHA -> SSA -> LCHA)."""

from __future__ import annotations

from ..attention.blocks import BlockContext
from ..attention.grid import TokenGrid
from ..numerics.gradcheck import GradCheckReport, grad_check
from ..numerics.rng import Rng
from .model import ModelConfig, SandwichBody


def group_grad_check(tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Check d(output)/d(input and a parameter of every stage) for mask ``[1, 0, 1]``.

    The stages covered are the LCHA kernel, conv and gate, the downsampler, the low-res
    attention block, and the upsampler that feeds the skip connection.
    """
    cfg = ModelConfig(width=8, heads=2, head_dim=4, groups=3, group_size=1, cond_dim=6)
    rng = Rng(seed).child("group-check")
    body = SandwichBody(cfg, rng.child("body"), mask=(1, 0, 1))
    grid = TokenGrid(2, 4, 4, cfg.width)
    ctx = BlockContext(grid, causal=True, chunk_frames=1)
    x = rng.normal((grid.length, cfg.width))
    cond = rng.normal((grid.frames, cfg.cond_dim))
    slots = [
        (body.lcha[0].blocks[0].mixer, "alpha"),
        (body.lcha[0].blocks[0].mixer, "kernel_weight"),
        (body.lcha[2].blocks[0].mixer, "conv_weight"),
        (body.down[1].proj, "weight"),
        (body.ssa[1].blocks[0].mixer.wq, "weight"),
        (body.up[2].proj, "weight"),
    ]
    originals = [getattr(m, a) for m, a in slots]

    def segment(x_t, *params):
        for (m, a), p in zip(slots, params):
            setattr(m, a, p)
        return body(x_t, cond, ctx)

    segment.__name__ = "sandwich_group"
    try:
        return grad_check(segment, [x] + [o.data for o in originals], tol, seed=seed)
    finally:
        for (m, a), o in zip(slots, originals):
            setattr(m, a, o)
