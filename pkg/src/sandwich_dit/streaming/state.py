"""Per-block caches carried across chunks during streaming generation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class LinAttnState:
    """Running ``S = sum_j R_j phi(k_j) v_j^T`` and ``z = sum_j phi(k_j)`` per head, in float64."""

    def __init__(self, heads: int, key_dim: int, value_dim: int):
        self.S = np.zeros((heads, key_dim, value_dim))
        self.z = np.zeros((heads, key_dim))
        self.tokens = 0

    def accumulate(self, s_add: np.ndarray, z_add: np.ndarray, tokens: int) -> None:
        self.S += s_add
        self.z += z_add
        self.tokens += int(tokens)

    def reset(self) -> None:
        self.S[...] = 0.0
        self.z[...] = 0.0
        self.tokens = 0

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + self.z.nbytes


class ConvRing:
    """The last ``kt - 1`` input frames of a causal temporal conv; zeros until filled."""

    def __init__(self, capacity: int, height: int, width: int, channels: int, dtype=np.float64):
        self.frames = np.zeros((capacity, height, width, channels), dtype=dtype)

    @property
    def capacity(self) -> int:
        return self.frames.shape[0]

    def push(self, x: np.ndarray) -> None:
        """Append frames ``x[T, H, W, C]``, evicting the oldest to keep ``capacity`` frames."""
        if self.capacity == 0:
            return
        if x.shape[1:] != self.frames.shape[1:]:
            raise ValueError(f"ring holds frames of shape {self.frames.shape[1:]}, got {x.shape[1:]}")
        both = np.concatenate([self.frames, x.astype(self.frames.dtype)], axis=0)
        self.frames[...] = both[-self.capacity:]

    def reset(self) -> None:
        self.frames[...] = 0.0

    @property
    def nbytes(self) -> int:
        return self.frames.nbytes


class SsaKvWindow:
    """Keys/values of the most recent ``window`` chunks (``None`` keeps everything)."""

    def __init__(self, window: int | None = 2):
        if window is not None and window < 0:
            raise ValueError(f"window must be >= 0, got {window}")
        self.window = window
        self.chunks: deque[tuple[np.ndarray, np.ndarray]] = deque()

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.chunks.append((k.copy(), v.copy()))
        while self.window is not None and len(self.chunks) > self.window:
            self.chunks.popleft()

    def history(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Cached ``[heads, tokens, d]`` keys and values, oldest first."""
        if not self.chunks:
            return None, None
        return (np.concatenate([k for k, _ in self.chunks], axis=1),
                np.concatenate([v for _, v in self.chunks], axis=1))

    @property
    def tokens(self) -> int:
        return sum(k.shape[1] for k, _ in self.chunks)

    def reset(self) -> None:
        self.chunks.clear()

    @property
    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in self.chunks)


@dataclass
class BlockState:
    lin: LinAttnState | None = None
    ring: ConvRing | None = None
    kv: SsaKvWindow | None = None

    def reset(self) -> None:
        for part in (self.lin, self.ring, self.kv):
            if part is not None:
                part.reset()


@dataclass
class StreamContext:
    """All block states of one engine. ``commit`` is set only while absorbing a finished chunk."""

    states: dict[str, BlockState] = field(default_factory=dict)
    commit: bool = False

    def state_for(self, key: str) -> BlockState:
        try:
            return self.states[key]
        except KeyError:
            raise KeyError(f"no streaming state for block {key!r}; layout and engine disagree") from None

    def reset(self) -> None:
        for st in self.states.values():
            st.reset()
        self.commit = False

    def bytes_by_kind(self) -> dict[str, int]:
        out = {"lin": 0, "conv": 0, "kv": 0}
        for st in self.states.values():
            out["lin"] += st.lin.nbytes if st.lin else 0
            out["conv"] += st.ring.nbytes if st.ring else 0
            out["kv"] += st.kv.nbytes if st.kv else 0
        return out
