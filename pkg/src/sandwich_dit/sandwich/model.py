"""Desk-scale diffusion transformer: a token embedder, a block body, and a velocity head.

Two bodies are provided: :class:`FullStack`, a plain stack of full-attention blocks (the
teacher), and :class:`SandwichBody`, the routing supernet holding an LCHA and an SSA branch
per group.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..attention.blocks import (
    BlockContext,
    LayerNorm,
    LchaConfig,
    Linear,
    PixelDown,
    PixelUp,
    TransformerBlock,
    full_block,
    lcha_block,
)
from ..attention.grid import TokenGrid
from ..numerics import ops
from ..numerics.module import Module, param
from ..numerics.rng import Rng
from ..numerics.tensor import Tensor
from .layout import check_mask
from .routing import RouteTrace, routed_forward


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    width: int = 16
    heads: int = 2
    head_dim: int = 8
    kernel_dim: int | None = None
    groups: int = 3
    group_size: int = 2
    stride: int = 2
    low_width: int | None = None
    text_dim: int = 8
    cond_dim: int = 16
    freq_dim: int = 16
    mlp_ratio: int = 2
    conv_kernel: tuple[int, int, int] = (3, 3, 3)
    rope: bool = True
    qk_norm: bool = True

    @property
    def inner_low_width(self) -> int:
        return self.low_width or self.width

    @property
    def total_blocks(self) -> int:
        return self.groups * self.group_size

    def lcha(self) -> LchaConfig:
        return LchaConfig(self.width, self.heads, self.head_dim, self.kernel_dim, tuple(self.conv_kernel),
                          qk_norm=self.qk_norm, rope=self.rope)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernel"] = list(self.conv_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown model config field(s): {unknown}")
        if "conv_kernel" in known:
            known["conv_kernel"] = tuple(known["conv_kernel"])
        return cls(**known)


class BlockGroup(Module):
    def __init__(self, blocks: list[TransformerBlock]):
        self.blocks = blocks

    def __call__(self, x, cond, ctx: BlockContext) -> Tensor:
        for b in self.blocks:
            x = b(x, cond, ctx)
        return x


class FullStack(Module):
    """``K`` full-attention blocks on the high-res grid."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.blocks = [full_block(cfg.width, cfg.heads, cfg.head_dim, cfg.cond_dim, rng.child(f"full{j}"),
                                  cfg.mlp_ratio, key=f"F{j}") for j in range(cfg.total_blocks)]

    def __call__(self, x, cond, ctx: BlockContext, **_) -> Tensor:
        for b in self.blocks:
            x = b(x, cond, ctx)
        return x


class SandwichBody(Module):
    """Routing supernet: per group an LCHA branch (high res) and an SSA branch (low res)."""

    def __init__(self, cfg: ModelConfig, rng: Rng, mask=None):
        self.cfg = cfg
        self.stride = cfg.stride
        self.low_width = cfg.inner_low_width
        lcfg = cfg.lcha()
        g = cfg.group_size
        self.lcha = [BlockGroup([lcha_block(lcfg, cfg.cond_dim, rng.child(f"L{n}.{i}"), cfg.mlp_ratio,
                                            key=f"L{n}.{i}") for i in range(g)]) for n in range(cfg.groups)]
        self.ssa = [BlockGroup([full_block(self.low_width, cfg.heads, cfg.head_dim, cfg.cond_dim,
                                           rng.child(f"S{n}.{i}"), cfg.mlp_ratio, key=f"S{n}.{i}")
                                for i in range(g)]) for n in range(cfg.groups)]
        self.down = [PixelDown(cfg.width, cfg.stride, self.low_width, rng.child(f"down{n}"))
                     for n in range(cfg.groups)]
        self.up = [PixelUp(self.low_width, cfg.stride, cfg.width, rng.child(f"up{n}"))
                   for n in range(cfg.groups)]
        self.logits = param(np.zeros((cfg.groups, 2)))
        self._mask = None if mask is None else check_mask(mask)

    @property
    def mask(self):
        return self._mask

    def set_mask(self, mask) -> None:
        mask = check_mask(mask)
        if len(mask) != self.cfg.groups:
            raise ValueError(f"mask has {len(mask)} groups, body has {self.cfg.groups}")
        self._mask = mask

    def weight_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters().items() if name != "logits"]

    def __call__(self, x, cond, ctx: BlockContext, mask=None, trace: RouteTrace | None = None) -> Tensor:
        mask = mask if mask is not None else self._mask
        if mask is None:
            raise ValueError("no routing mask: pass one or set_mask() first")
        return routed_forward(self, x, cond, ctx, mask, trace=trace)


def inherit_from_teacher(body: SandwichBody, teacher: FullStack) -> int:
    """Copy every shape-compatible teacher tensor into the matching LCHA and SSA blocks.

    Teacher block ``j`` feeds block ``j % k_g`` of group ``j // k_g`` in both branches.
    Returns the number of tensors copied.
    """
    g = body.cfg.group_size
    copied = 0
    for j, tb in enumerate(teacher.blocks):
        state = tb.state_dict()
        n, i = divmod(j, g)
        if n >= len(body.lcha):
            break
        copied += len(body.lcha[n].blocks[i].load_state_dict(state, strict=False))
        copied += len(body.ssa[n].blocks[i].load_state_dict(state, strict=False))
    return copied


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * t`` for a vector of timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class DiT(Module):
    """Velocity model ``v(x_t, t, c_text)`` over flattened latent tokens ``[L, C_in]``."""

    def __init__(self, cfg: ModelConfig, body: Module, rng: Rng):
        self.cfg = cfg
        self.body = body
        self.embed = Linear(cfg.in_channels, cfg.width, rng.child("embed"))
        self.time1 = Linear(cfg.freq_dim, cfg.cond_dim, rng.child("time1"))
        self.time2 = Linear(cfg.cond_dim, cfg.cond_dim, rng.child("time2"))
        self.text = Linear(cfg.text_dim, cfg.cond_dim, rng.child("text"))
        self.norm = LayerNorm(cfg.width, affine=False)
        self.head = Linear(cfg.width, cfg.in_channels, rng.child("head"))

    def grid(self, frames: int, height: int, width: int) -> TokenGrid:
        return TokenGrid(frames, height, width, self.cfg.width)

    def condition(self, t_frames, c_text) -> Tensor:
        feats = Tensor(timestep_features(t_frames, self.cfg.freq_dim))
        temb = self.time2(ops.silu(self.time1(feats)))
        text = self.text(ops.reshape(c_text if isinstance(c_text, Tensor) else Tensor(c_text),
                                     (1, self.cfg.text_dim)))
        return ops.add(temb, text)

    def __call__(self, x, t_frames, c_text, ctx: BlockContext, **body_kw) -> Tensor:
        t_frames = np.broadcast_to(np.asarray(t_frames, dtype=np.float64), (ctx.grid.frames,))
        cond = self.condition(t_frames, c_text)
        h = self.body(self.embed(x), cond, ctx, **body_kw)
        return self.head(self.norm(h))


def build_teacher(cfg: ModelConfig, seed: int) -> DiT:
    rng = Rng(seed).child("teacher")
    return DiT(cfg, FullStack(cfg, rng.child("body")), rng)


def build_sandwich(cfg: ModelConfig, seed: int, mask=None, teacher: DiT | None = None) -> DiT:
    """Sandwich model; with ``teacher`` its blocks and embed/head layers start from the teacher."""
    rng = Rng(seed).child("sandwich")
    model = DiT(cfg, SandwichBody(cfg, rng.child("body"), mask), rng)
    if teacher is not None:
        inherit_from_teacher(model.body, teacher.body)
        for name in ("embed", "time1", "time2", "text", "head"):
            getattr(model, name).load_state_dict(getattr(teacher, name).state_dict())
    return model
