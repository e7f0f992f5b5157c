"""Analytic byte counts of the streaming caches."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..sandwich.model import ModelConfig
from .engine import ChunkPlan

F64 = np.dtype(np.float64).itemsize


@dataclass(frozen=True)
class FootprintReport:
    lin_bytes: int
    conv_bytes: int
    kv_bytes: int
    kv_tokens: int
    lin_blocks: int
    kv_blocks: int
    frame_independent: dict

    @property
    def total(self) -> int:
        return self.lin_bytes + self.conv_bytes + self.kv_bytes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def cache_footprint(cfg: ModelConfig, mask, plan: ChunkPlan, window: int | None, chunks: int | None = None,
                    itemsize: int = F64) -> FootprintReport:
    """Cache bytes after ``chunks`` committed chunks (default ``plan.chunks``).

    Linear-attention state is ``heads x d_k x (d_v + 1)`` accumulators per LCHA block and the
    conv ring ``(k_t - 1)`` frames per LCHA block, both independent of the chunk count. Each SSA
    block keeps keys and values for ``min(chunks, window)`` chunks of low-res tokens.
    """
    chunks = plan.chunks if chunks is None else chunks
    lcfg = cfg.lcha()
    n_lcha = cfg.group_size * sum(mask)
    n_ssa = cfg.group_size * (len(mask) - sum(mask))
    lin = n_lcha * lcfg.heads * lcfg.feature_dim * (lcfg.head_dim + 1) * F64
    kt = lcfg.conv_kernel[0]
    conv = n_lcha * (kt - 1) * plan.height * plan.width * cfg.width * itemsize
    low_tokens = plan.frames_per_chunk * (plan.height // cfg.stride) * (plan.width // cfg.stride)
    kept = chunks if window is None else min(chunks, window)
    kv_tokens = kept * low_tokens
    kv = n_ssa * 2 * cfg.heads * kv_tokens * cfg.head_dim * itemsize
    return FootprintReport(lin, conv, kv, kv_tokens, n_lcha, n_ssa,
                           {"lin": True, "conv": True, "kv": window is not None})
