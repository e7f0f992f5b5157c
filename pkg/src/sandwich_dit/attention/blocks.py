"""Transformer blocks: AdaLN-modulated wrapper around the attention mixers.

Mixers operate on flat tokens ``[L, C]`` laid out on a :class:`TokenGrid`. A mixer
receives an optional per-block streaming ``state`` (see ``sandwich_dit.streaming.state``);
with a state it processes one chunk against cached history, and updates that history
only when the context is committing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..numerics import ops
from ..numerics.module import Module, param
from ..numerics.rng import Rng
from ..numerics.tensor import Tensor
from .conv import local_conv_path
from .grid import TokenGrid
from .kernels import KernelParams, full_attention, kernel_map, kv_compress_attention, linear_attention
from .rope import rope3d


@dataclass(frozen=True)
class LchaConfig:
    width: int
    heads: int = 2
    head_dim: int = 128
    kernel_dim: int | None = None
    conv_kernel: tuple[int, int, int] = (3, 3, 3)
    gate_init: float = 0.0
    qk_norm: bool = True
    rope: bool = True
    rope_base: float = 10000.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.head_dim <= 0 or self.heads <= 0:
            raise ValueError("heads and head_dim must be positive")
        kt, kh, kw = self.conv_kernel
        if kt < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv kernel {self.conv_kernel} must be odd in the spatial dims")
        if self.rope and self.feature_dim % 2:
            raise ValueError("rope needs an even kernel feature dimension")

    @property
    def feature_dim(self) -> int:
        return self.kernel_dim or self.head_dim


@dataclass(frozen=True)
class SsaConfig:
    width: int
    heads: int = 2
    head_dim: int = 128
    stride: int = 2
    low_width: int | None = None

    @property
    def inner_width(self) -> int:
        return self.low_width or self.width


@dataclass
class BlockContext:
    """Per-call layout and causality settings shared by every block in a forward pass."""

    grid: TokenGrid
    causal: bool = False
    chunk_frames: int | None = None
    frame_offset: int = 0
    stream: object | None = None
    stats: dict | None = field(default=None, repr=False)

    @property
    def segments(self) -> np.ndarray | None:
        if not self.causal:
            return None
        return self.grid.chunk_segments(self.chunk_frames, self.frame_offset)

    @property
    def commit(self) -> bool:
        return bool(self.stream is not None and self.stream.commit)

    def on_grid(self, grid: TokenGrid) -> "BlockContext":
        return replace(self, grid=grid)

    def count(self, kind: str, tokens: int) -> None:
        if self.stats is not None:
            self.stats[kind] = self.stats.get(kind, 0) + tokens


@dataclass
class AdaLnParams:
    shift_attn: Tensor
    scale_attn: Tensor
    gate_attn: Tensor
    shift_mlp: Tensor
    scale_mlp: Tensor
    gate_mlp: Tensor

    def expand(self, index: np.ndarray) -> "AdaLnParams":
        """Broadcast per-frame rows to per-token rows."""
        return AdaLnParams(*(ops.take(getattr(self, f), index, axis=0) for f in self.__dataclass_fields__))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True, gain: float = 1.0,
                 dtype=np.float64):
        self.weight = param(rng.normal((out_features, in_features), scale=gain / math.sqrt(in_features), dtype=dtype))
        self.bias = param(np.zeros(out_features, dtype=dtype)) if bias else None

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "Linear":
        layer = cls.__new__(cls)
        layer.weight = param(np.eye(n, dtype=dtype))
        layer.bias = param(np.zeros(n, dtype=dtype))
        return layer

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, affine: bool = True, eps: float = 1e-5, dtype=np.float64):
        self.eps = eps
        self.gamma = param(np.ones(width, dtype=dtype)) if affine else None
        self.beta = param(np.zeros(width, dtype=dtype)) if affine else None

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class AdaLN(Module):
    """Six modulation vectors (shift/scale/gate for attention and MLP) from a conditioning row."""

    def __init__(self, cond_dim: int, width: int, rng: Rng, gain: float = 0.5):
        self.width = width
        self.proj = Linear(cond_dim, 6 * width, rng, gain=gain)

    def __call__(self, cond) -> AdaLnParams:
        mod = self.proj(ops.silu(cond))
        rows = mod.shape[0]
        parts = ops.reshape(mod, (rows, 6, self.width))
        chunks = [ops.reshape(ops.take(parts, [i], axis=1), (rows, self.width)) for i in range(6)]
        return AdaLnParams(chunks[0], chunks[1], ops.sigmoid(chunks[2]),
                           chunks[3], chunks[4], ops.sigmoid(chunks[5]))


def modulate(x, shift, scale) -> Tensor:
    return ops.add(ops.mul(x, ops.add(scale, 1.0)), shift)


class Mlp(Module):
    def __init__(self, width: int, hidden: int, rng: Rng):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))


def split_heads(x, heads: int) -> Tensor:
    L, d = x.shape
    return ops.transpose(ops.reshape(x, (L, heads, d // heads)), (1, 0, 2))


def merge_heads(x) -> Tensor:
    h, L, d = x.shape
    return ops.reshape(ops.transpose(x, (1, 0, 2)), (L, h * d))


class FullAttention(Module):
    kind = "full"

    def __init__(self, width: int, heads: int, head_dim: int, rng: Rng):
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.wq = Linear(width, inner, rng, bias=False)
        self.wk = Linear(width, inner, rng, bias=False)
        self.wv = Linear(width, inner, rng, bias=False)
        self.wo = Linear(inner, width, rng)

    def qkv(self, h):
        return (split_heads(self.wq(h), self.heads), split_heads(self.wk(h), self.heads),
                split_heads(self.wv(h), self.heads))

    def __call__(self, h, ctx: BlockContext, state=None) -> Tensor:
        q, k, v = self.qkv(h)
        kv = getattr(state, "kv", None)
        if kv is not None:
            past_k, past_v = kv.history()
            if past_k is not None:
                k_all = ops.concat([Tensor(past_k), k], axis=1)
                v_all = ops.concat([Tensor(past_v), v], axis=1)
            else:
                k_all, v_all = k, v
            out = full_attention(q, k_all, v_all)
            if ctx.commit:
                kv.append(k.data, v.data)
        else:
            seg = ctx.segments
            out = full_attention(q, k, v, causal=ctx.causal, q_segments=seg, k_segments=seg)
        ctx.count(self.kind, q.shape[1])
        return self.wo(merge_heads(out))


class LchaAttention(Module):
    """Linear-attention path and causal depthwise-conv path mixed by a sigmoid gate."""

    kind = "lcha"

    def __init__(self, cfg: LchaConfig, rng: Rng):
        self.cfg = cfg
        inner = cfg.heads * cfg.head_dim
        self.wq = Linear(cfg.width, inner, rng, bias=False)
        self.wk = Linear(cfg.width, inner, rng, bias=False)
        self.wv = Linear(cfg.width, inner, rng, bias=False)
        self.wo = Linear(inner, cfg.width, rng)
        kp = KernelParams.init(rng.child("kernel"), cfg.head_dim, cfg.feature_dim, cfg.heads)
        self.kernel_weight, self.kernel_bias = kp.weight, kp.bias
        kt, kh, kw = cfg.conv_kernel
        self.conv_weight = param(rng.normal((kt, kh, kw, cfg.width), scale=1.0 / math.sqrt(kt * kh * kw)))
        self.conv_bias = param(np.zeros(cfg.width))
        self.mix = Linear(cfg.width, cfg.width, rng)
        self.alpha = param(np.asarray(float(cfg.gate_init)))

    @property
    def kernel(self) -> KernelParams:
        return KernelParams(self.kernel_weight, self.kernel_bias)

    def qkv(self, h):
        cfg = self.cfg
        q = split_heads(self.wq(h), cfg.heads)
        k = split_heads(self.wk(h), cfg.heads)
        v = split_heads(self.wv(h), cfg.heads)
        if cfg.qk_norm:
            q = ops.layer_norm(q)
            k = ops.layer_norm(k)
        return q, k, v

    def linear_path(self, h, ctx: BlockContext, state=None) -> Tensor:
        cfg = self.cfg
        q, k, v = self.qkv(h)
        positions = ctx.grid.positions(ctx.frame_offset) if cfg.rope else None
        lin = getattr(state, "lin", None)
        if lin is None:
            out = linear_attention(q, k, v, self.kernel, positions=positions, causal=ctx.causal,
                                   segments=ctx.segments, eps=cfg.eps, rope_base=cfg.rope_base)
        else:
            out = self._linear_stream(q, k, v, positions, lin, ctx)
        ctx.count(self.kind, q.shape[1])
        return self.wo(merge_heads(out))

    def _linear_stream(self, q, k, v, positions, lin, ctx: BlockContext) -> Tensor:
        # Chunk tokens see the inherited state plus the whole current chunk.
        cfg = self.cfg
        fq = kernel_map(q, self.kernel)
        fk = kernel_map(k, self.kernel)
        rq = rope3d(fq, positions, cfg.rope_base) if positions is not None else fq
        rk = rope3d(fk, positions, cfg.rope_base) if positions is not None else fk
        chunk_state = ops.einsum("hld,hle->hde", rk, v)
        chunk_norm = ops.sum(fk, axis=1)
        state = ops.add(Tensor(lin.S), chunk_state)
        norm = ops.add(Tensor(lin.z), chunk_norm)
        num = ops.einsum("hld,hde->hle", rq, state)
        den = ops.einsum("hld,hd->hl", fq, norm)
        den = ops.reshape(ops.add(den, cfg.eps), (*den.shape, 1))
        if ctx.commit:
            lin.accumulate(chunk_state.data, chunk_norm.data, q.shape[1])
        return ops.div(num, den)

    def conv_path(self, h, ctx: BlockContext, state=None) -> Tensor:
        grid = ctx.grid
        x = grid.unflatten(h)
        ring = getattr(state, "ring", None)
        history = Tensor(ring.frames) if ring is not None else None
        y = local_conv_path(x, self.conv_weight, self.conv_bias, self.mix.weight, self.mix.bias,
                            causal=True, history=history)
        if ring is not None and ctx.commit:
            ring.push(x.data)
        return grid.flatten(y)

    def gate(self) -> Tensor:
        return ops.sigmoid(self.alpha)

    def branches(self, h, ctx: BlockContext, state=None) -> tuple[Tensor, Tensor]:
        return self.linear_path(h, ctx, state), self.conv_path(h, ctx, state)

    def __call__(self, h, ctx: BlockContext, state=None) -> Tensor:
        lin, conv = self.branches(h, ctx, state)
        g = self.gate()
        return ops.add(ops.mul(g, lin), ops.mul(ops.sub(1.0, g), conv))


class PixelDown(Module):
    """Space-to-channel by ``stride x stride`` followed by a linear projection."""

    def __init__(self, width: int, stride: int, out_width: int, rng: Rng | None = None, identity: bool = False):
        self.stride = stride
        self.out_width = out_width
        fan_in = stride * stride * width
        if identity:
            if fan_in != out_width:
                raise ValueError("identity projection needs out_width == stride^2 * width")
            self.proj = Linear.identity(fan_in)
        else:
            self.proj = Linear(fan_in, out_width, rng)

    def __call__(self, x, grid: TokenGrid) -> tuple[Tensor, TokenGrid]:
        s = self.stride
        low = grid.downsample(s, self.out_width)
        g = ops.reshape(x, (grid.frames, low.height, s, low.width, s, grid.channels))
        g = ops.transpose(g, (0, 1, 3, 2, 4, 5))
        g = ops.reshape(g, (low.length, s * s * grid.channels))
        return self.proj(g), low


class PixelUp(Module):
    """Linear projection followed by channel-to-space by ``stride x stride``."""

    def __init__(self, width: int, stride: int, out_width: int, rng: Rng | None = None, identity: bool = False):
        self.stride = stride
        self.out_width = out_width
        fan_out = stride * stride * out_width
        if identity:
            if fan_out != width:
                raise ValueError("identity projection needs width == stride^2 * out_width")
            self.proj = Linear.identity(width)
        else:
            self.proj = Linear(width, fan_out, rng)

    def __call__(self, x, low: TokenGrid) -> tuple[Tensor, TokenGrid]:
        s = self.stride
        high = TokenGrid(low.frames, low.height * s, low.width * s, self.out_width)
        g = ops.reshape(self.proj(x), (low.frames, low.height, low.width, s, s, self.out_width))
        g = ops.transpose(g, (0, 1, 3, 2, 4, 5))
        return ops.reshape(g, (high.length, self.out_width)), high


class StrideAttention(Module):
    """Full attention on a ``stride``-downsampled copy of the tokens, upsampled back."""

    kind = "ssa"

    def __init__(self, cfg: SsaConfig, rng: Rng, identity_projections: bool = False):
        self.cfg = cfg
        s = cfg.stride
        if identity_projections:
            inner = s * s * cfg.width
            self.down = PixelDown(cfg.width, s, inner, identity=True)
            self.up = PixelUp(inner, s, cfg.width, identity=True)
        else:
            inner = cfg.inner_width
            self.down = PixelDown(cfg.width, s, inner, rng)
            self.up = PixelUp(inner, s, cfg.width, rng)
        self.attn = FullAttention(inner, cfg.heads, cfg.head_dim, rng)

    def __call__(self, h, ctx: BlockContext, state=None) -> Tensor:
        low, low_grid = self.down(h, ctx.grid)
        ctx.count(self.kind, low.shape[0])
        inner = self.attn(low, ctx.on_grid(low_grid), state)
        out, _ = self.up(inner, low_grid)
        return out


class KvCompressAttention(Module):
    """Ablation baseline: full-length queries, keys/values average-pooled spatially."""

    kind = "kvc"

    def __init__(self, width: int, heads: int, head_dim: int, pool: int, rng: Rng):
        self.pool = pool
        self.attn = FullAttention(width, heads, head_dim, rng)

    def __call__(self, h, ctx: BlockContext, state=None) -> Tensor:
        q, k, v = self.attn.qkv(h)
        out = kv_compress_attention(q, k, v, ctx.grid, self.pool)
        ctx.count(self.kind, q.shape[1])
        return self.attn.wo(merge_heads(out))


class TransformerBlock(Module):
    """Pre-norm block: ``x + g1 * mixer(mod(LN(x)))`` then ``x + g2 * mlp(mod(LN(x)))``."""

    def __init__(self, mixer: Module, width: int, cond_dim: int, rng: Rng, mlp_ratio: int = 2, key: str = ""):
        self.mixer = mixer
        self.norm1 = LayerNorm(width)
        self.norm2 = LayerNorm(width)
        self.ada = AdaLN(cond_dim, width, rng.child("ada"))
        self.mlp = Mlp(width, mlp_ratio * width, rng.child("mlp"))
        self.key = key

    @property
    def kind(self) -> str:
        return self.mixer.kind

    def modulation(self, cond, ctx: BlockContext) -> AdaLnParams:
        return self.ada(cond).expand(ctx.grid.frame_index())

    def __call__(self, x, cond, ctx: BlockContext, ada: AdaLnParams | None = None) -> Tensor:
        ada = ada if ada is not None else self.modulation(cond, ctx)
        state = ctx.stream.state_for(self.key) if ctx.stream is not None else None
        h = modulate(self.norm1(x), ada.shift_attn, ada.scale_attn)
        x = ops.add(x, ops.mul(ada.gate_attn, self.mixer(h, ctx, state)))
        h = modulate(self.norm2(x), ada.shift_mlp, ada.scale_mlp)
        return ops.add(x, ops.mul(ada.gate_mlp, self.mlp(h)))


def lcha_block(cfg: LchaConfig, cond_dim: int, rng: Rng, mlp_ratio: int = 2, key: str = "") -> TransformerBlock:
    return TransformerBlock(LchaAttention(cfg, rng.child("lcha")), cfg.width, cond_dim, rng, mlp_ratio, key)


def ssa_block(cfg: SsaConfig, cond_dim: int, rng: Rng, mlp_ratio: int = 2, key: str = "",
              identity_projections: bool = False) -> TransformerBlock:
    mixer = StrideAttention(cfg, rng.child("ssa"), identity_projections)
    return TransformerBlock(mixer, cfg.width, cond_dim, rng, mlp_ratio, key)


def full_block(width: int, heads: int, head_dim: int, cond_dim: int, rng: Rng, mlp_ratio: int = 2,
               key: str = "") -> TransformerBlock:
    return TransformerBlock(FullAttention(width, heads, head_dim, rng.child("full")), width, cond_dim, rng,
                            mlp_ratio, key)
