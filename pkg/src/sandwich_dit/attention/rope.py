"""Rotary position embedding over (t, h, w) positions."""

from __future__ import annotations

import numpy as np

from ..numerics import ops
from .grid import TokenGrid


def rope_pair_split(dim: int) -> tuple[int, int, int]:
    """Rotation pairs per axis: equal thirds, remainder to the temporal axis."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"rope dimension must be positive and even, got {dim}")
    pairs = dim // 2
    third = pairs // 3
    return pairs - 2 * third, third, third


def rope_angles(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError("positions must have shape (L, 3)")
    parts = []
    for axis, npairs in enumerate(rope_pair_split(dim)):
        if npairs == 0:
            continue
        freqs = base ** (-np.arange(npairs) / npairs)
        parts.append(positions[:, axis:axis + 1].astype(np.float64) * freqs)
    return np.concatenate(parts, axis=1)


def rope3d(x, grid_or_positions, base: float = 10000.0, frame_offset: int = 0):
    """Rotate ``x[..., L, d]`` per token; norms are preserved exactly up to rounding."""
    if isinstance(grid_or_positions, TokenGrid):
        positions = grid_or_positions.positions(frame_offset)
    else:
        positions = np.asarray(grid_or_positions)
    return ops.rotate_pairs(x, rope_angles(positions, x.shape[-1], base))
