from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ops
from ..numerics.tensor import Tensor


@dataclass(frozen=True)
class TokenGrid:
    """Video token grid; tokens flatten in (t, h, w) order so ``L = T*H*W``."""

    frames: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ValueError(f"grid extents must be positive: {self}")

    @property
    def length(self) -> int:
        return self.frames * self.height * self.width

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    def flatten(self, x) -> Tensor:
        return ops.reshape(x, (self.length, self.channels))

    def unflatten(self, x) -> Tensor:
        return ops.reshape(x, self.shape)

    def positions(self, frame_offset: int = 0) -> np.ndarray:
        t, h, w = np.meshgrid(np.arange(self.frames) + frame_offset, np.arange(self.height),
                              np.arange(self.width), indexing="ij")
        return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)

    def frame_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.frames), self.tokens_per_frame)

    def chunk_segments(self, frames_per_chunk: int | None, frame_offset: int = 0) -> np.ndarray | None:
        """Per-token chunk id, or None for token-level causality."""
        if frames_per_chunk is None:
            return None
        return (self.frame_index() + frame_offset) // frames_per_chunk

    def with_frames(self, frames: int) -> "TokenGrid":
        return TokenGrid(frames, self.height, self.width, self.channels)

    def downsample(self, stride: int, channels: int | None = None) -> "TokenGrid":
        if self.height % stride or self.width % stride:
            raise ValueError(f"grid {self.height}x{self.width} not divisible by stride {stride}")
        return TokenGrid(self.frames, self.height // stride, self.width // stride,
                         self.channels if channels is None else channels)
