"""Attention kernels: softmax reference, positive-kernel linear attention, KV compression."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..numerics import ops
from ..numerics.rng import Rng
from ..numerics.tensor import Tensor
from .rope import rope3d

LINEAR_ATTN_EPS = 1e-6


class DegenerateDenominatorWarning(RuntimeWarning):
    pass


@dataclass
class KernelParams:
    """Learnable feature map ``phi(x) = softplus(W x + b)``.

    ``weight`` is ``[d_k, d_h]`` (single head) or ``[heads, d_k, d_h]``; ``bias`` matches
    without the last axis.
    """

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: Rng, head_dim: int, kernel_dim: int | None = None, heads: int | None = None,
             dtype=np.float64) -> "KernelParams":
        kernel_dim = kernel_dim or head_dim
        lead = () if heads is None else (heads,)
        w = rng.normal((*lead, kernel_dim, head_dim), scale=1.0 / math.sqrt(head_dim), dtype=dtype)
        b = np.zeros((*lead, kernel_dim), dtype=dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

    @property
    def kernel_dim(self) -> int:
        return self.weight.shape[-2]


def _heads(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return ops.reshape(x, (1, *x.shape)), True
    if x.ndim != 3:
        raise ValueError(f"expected [L, d] or [heads, L, d], got {x.shape}")
    return x, False


def _unheads(y: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(y, y.shape[1:]) if squeeze else y


def kernel_map(x, p: KernelParams) -> Tensor:
    """Strictly positive features ``softplus(W x + b)`` for ``x[L, d_h]`` or ``x[heads, L, d_h]``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2 and p.weight.ndim == 2:
        return ops.softplus(ops.linear(x, p.weight, p.bias))
    xh, squeeze = _heads(x)
    w, b = p.weight, p.bias
    if w.ndim == 2:
        w = ops.reshape(w, (1, *w.shape))
        b = ops.reshape(b, (1, *b.shape))
    z = ops.einsum("hld,hkd->hlk", xh, w)
    z = ops.add(z, ops.reshape(b, (b.shape[0], 1, b.shape[1])))
    return _unheads(ops.softplus(z), squeeze)


def segment_ends(segments: np.ndarray) -> np.ndarray:
    """For each token, the index of the last token in its segment. Segments must be non-decreasing."""
    segments = np.asarray(segments)
    if np.any(np.diff(segments) < 0):
        raise ValueError("causal segments must be non-decreasing along the sequence")
    n = segments.shape[0]
    last = np.empty(n, dtype=np.int64)
    boundaries = np.flatnonzero(np.diff(segments)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [n]])
    for s, e in zip(starts, stops):
        last[s:e] = e - 1
    return last


def _causal_prefix(x: Tensor, segments) -> Tensor:
    """Sum of ``x[:, j]`` over all tokens j whose segment is <= the segment of token i (axis 1)."""
    cs = ops.cumsum(x, axis=1)
    if segments is None:
        return cs
    return ops.take(cs, segment_ends(segments), axis=1)


def linear_attention(q, k, v, params: KernelParams, *, positions=None, causal: bool = False,
                     segments=None, eps: float = LINEAR_ATTN_EPS, rope_base: float = 10000.0) -> Tensor:
    """Positive-kernel linear attention in the O(L) associative form.

    The key-value state ``sum_j R_j phi(k_j) v_j^T`` and the normalizer ``sum_j phi(k_j)`` are
    accumulated once (prefix sums when causal). RoPE, when ``positions`` is given, rotates only
    the numerator features; the denominator uses the unrotated features. ``segments`` turns
    token-level causality into block causality (token i sees every j with segment_j <= segment_i).
    """
    qh, squeeze = _heads(q)
    kh, _ = _heads(k)
    vh, _ = _heads(v)
    L = qh.shape[1]
    if L == 0:
        raise ValueError("linear_attention on an empty sequence")
    fq = kernel_map(qh, params)
    fk = kernel_map(kh, params)
    if positions is not None:
        rq = rope3d(fq, positions, rope_base)
        rk = rope3d(fk, positions, rope_base)
    else:
        rq, rk = fq, fk
    if not causal:
        state = ops.einsum("hld,hle->hde", rk, vh)
        norm = ops.sum(fk, axis=1)
        num = ops.einsum("hld,hde->hle", rq, state)
        den = ops.einsum("hld,hd->hl", fq, norm)
    else:
        h, _, dk = rk.shape
        dv = vh.shape[2]
        outer = ops.reshape(ops.einsum("hld,hle->hlde", rk, vh), (h, L, dk * dv))
        state = ops.reshape(_causal_prefix(outer, segments), (h, L, dk, dv))
        norm = _causal_prefix(fk, segments)
        num = ops.einsum("hld,hlde->hle", rq, state)
        den = ops.sum(ops.mul(fq, norm), axis=-1)
    _warn_degenerate(den.data, eps)
    den = ops.reshape(ops.add(den, eps), (*den.shape, 1))
    return _unheads(ops.div(num, den), squeeze)


def _warn_degenerate(den: np.ndarray, eps: float) -> None:
    low = den < eps
    if low.any():
        warnings.warn(DegenerateDenominatorWarning(
            f"{int(low.sum())} linear-attention denominator(s) below eps={eps:g} (min {den.min():.3e});"
            " inputs drive the kernel features to zero"), stacklevel=3)


def linear_attention_map(q, k, params: KernelParams, *, positions=None, causal: bool = False,
                         segments=None, eps: float = LINEAR_ATTN_EPS, rope_base: float = 10000.0) -> np.ndarray:
    """The implicit ``[heads, L, L]`` weight matrix with ``map @ v == linear_attention(...)``.

    Without RoPE each row is a normalized (convex) weighting up to the ``eps`` floor.
    """
    qh, _ = _heads(q)
    kh, _ = _heads(k)
    fq = kernel_map(qh, params).data
    fk = kernel_map(kh, params).data
    if positions is not None:
        rq = rope3d(Tensor(fq), positions, rope_base).data
        rk = rope3d(Tensor(fk), positions, rope_base).data
    else:
        rq, rk = fq, fk
    L = fq.shape[1]
    numer = np.einsum("hid,hjd->hij", rq, rk)
    raw = np.einsum("hid,hjd->hij", fq, fk)
    if causal:
        seg = np.arange(L) if segments is None else np.asarray(segments)
        allowed = seg[None, :] <= seg[:, None]
        numer = numer * allowed
        raw = raw * allowed
    den = raw.sum(axis=-1, keepdims=True) + eps
    return numer / den


def attention_mask(q_segments, k_segments) -> np.ndarray:
    return np.asarray(k_segments)[None, :] <= np.asarray(q_segments)[:, None]


def full_attention(q, k, v, *, causal: bool = False, q_segments=None, k_segments=None) -> Tensor:
    """Softmax attention ``softmax(q k^T / sqrt(d)) v`` for ``[L, d]`` or ``[heads, L, d]`` inputs.

    With ``causal`` and no segments, queries are taken to be the last ``Lq`` positions of the key
    sequence (so a chunk of queries against a cached prefix is masked correctly).
    """
    qh, squeeze = _heads(q)
    kh, _ = _heads(k)
    vh, _ = _heads(v)
    lq, lk = qh.shape[1], kh.shape[1]
    if lq == 0 or lk == 0:
        raise ValueError("full_attention on an empty sequence")
    scores = ops.scale(ops.einsum("hld,hmd->hlm", qh, kh), 1.0 / math.sqrt(qh.shape[2]))
    mask = None
    if causal:
        qs = np.arange(lk - lq, lk) if q_segments is None else q_segments
        ks = np.arange(lk) if k_segments is None else k_segments
        mask = attention_mask(qs, ks)[None]
    weights = ops.softmax(scores, mask=mask)
    return _unheads(ops.einsum("hlm,hmd->hld", weights, vh), squeeze)


def pool_tokens(x, frames: int, height: int, width: int, stride: int) -> Tensor:
    """Average ``stride x stride`` spatial patches of ``x[heads, T*H*W, d]``."""
    if height % stride or width % stride:
        raise ValueError(f"grid {height}x{width} not divisible by pooling stride {stride}")
    xh, squeeze = _heads(x)
    h, L, d = xh.shape
    if L != frames * height * width:
        raise ValueError(f"token count {L} does not match grid {frames}x{height}x{width}")
    g = ops.reshape(xh, (h, frames, height // stride, stride, width // stride, stride, d))
    pooled = ops.mean(g, axis=(3, 5))
    return _unheads(ops.reshape(pooled, (h, frames * (height // stride) * (width // stride), d)), squeeze)


def kv_compress_attention(q, k, v, grid, pool: int) -> Tensor:
    """Full-length queries against spatially average-pooled keys and values."""
    kp = pool_tokens(k, grid.frames, grid.height, grid.width, pool)
    vp = pool_tokens(v, grid.frames, grid.height, grid.width, pool)
    return full_attention(q, kp, vp)
