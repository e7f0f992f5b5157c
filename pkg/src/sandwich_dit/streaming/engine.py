"""Chunked autoregressive generation with fixed-size linear/conv caches and windowed SSA KV.

Each chunk is denoised from pure noise with a few Euler steps while every cache is read-only.
The finished chunk is then pushed through the model once more at t=0 with ``commit`` set, which
is the only time caches change. The offline reference reproduces the same computation as one
chunk-causal forward over all frames generated so far.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..attention.blocks import BlockContext, FullAttention, LchaAttention, StrideAttention
from ..numerics.tensor import NonFiniteError, Tensor, no_grad
from ..sandwich.model import DiT, FullStack, SandwichBody
from .state import BlockState, ConvRing, LinAttnState, SsaKvWindow, StreamContext


@dataclass(frozen=True)
class ChunkPlan:
    frames_per_chunk: int = 3
    steps: int = 4
    height: int = 4
    width: int = 4
    chunks: int = 4

    def __post_init__(self):
        if self.frames_per_chunk < 1 or self.steps < 1:
            raise ValueError("frames per chunk and steps must both be >= 1")
        if self.chunks < 0 or self.height < 1 or self.width < 1:
            raise ValueError(f"invalid chunk plan {self}")

    def timesteps(self) -> np.ndarray:
        return np.linspace(1.0, 0.0, self.steps + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def route_blocks(model: DiT):
    """Yield ``(block, on_low_grid)`` for every block that runs under the model's hard route."""
    body = model.body
    if isinstance(body, SandwichBody):
        if body.mask is None:
            raise ValueError("streaming needs a hardened mask on the sandwich body")
        for n, m in enumerate(body.mask):
            group = body.lcha[n] if m else body.ssa[n]
            for b in group.blocks:
                yield b, not m
    elif isinstance(body, FullStack):
        for b in body.blocks:
            yield b, False
    else:
        raise TypeError(f"cannot stream a body of type {type(body).__name__}")


def make_states(model: DiT, plan: ChunkPlan, window: int | None) -> StreamContext:
    ctx = StreamContext()
    for block, _ in route_blocks(model):
        mixer = block.mixer
        if isinstance(mixer, LchaAttention):
            c = mixer.cfg
            kt = c.conv_kernel[0]
            ctx.states[block.key] = BlockState(lin=LinAttnState(c.heads, c.feature_dim, c.head_dim),
                                               ring=ConvRing(kt - 1, plan.height, plan.width, c.width))
        elif isinstance(mixer, (FullAttention, StrideAttention)):
            ctx.states[block.key] = BlockState(kv=SsaKvWindow(window))
        else:
            raise TypeError(f"block {block.key!r} has no streaming form ({type(mixer).__name__})")
    if not ctx.states:
        raise ValueError("model has no blocks to stream")
    return ctx


@dataclass
class ChunkRecord:
    index: int
    seconds: float
    cache_bytes: dict
    lin_tokens: int


@dataclass
class StreamEngine:
    model: DiT
    plan: ChunkPlan
    window: int | None = 2
    stream: StreamContext = field(init=False)
    frames_done: int = field(init=False, default=0)
    records: list[ChunkRecord] = field(init=False, default_factory=list)
    high_water: dict = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.stream = make_states(self.model, self.plan, self.window)
        self.high_water = {"lin": 0, "conv": 0, "kv": 0}

    def reset(self) -> "StreamEngine":
        self.stream.reset()
        self.frames_done = 0
        self.records.clear()
        self.high_water = {"lin": 0, "conv": 0, "kv": 0}
        return self

    def _ctx(self) -> BlockContext:
        p = self.plan
        grid = self.model.grid(p.frames_per_chunk, p.height, p.width)
        return BlockContext(grid, causal=True, chunk_frames=p.frames_per_chunk, frame_offset=self.frames_done,
                            stream=self.stream)

    def stream_step(self, noise, c_text) -> np.ndarray:
        """Denoise one chunk from ``noise[F, H, W, C_in]`` and absorb it into the caches."""
        p = self.plan
        noise = np.asarray(noise, dtype=np.float64)
        expect = (p.frames_per_chunk, p.height, p.width, self.model.cfg.in_channels)
        if noise.shape != expect:
            raise ValueError(f"chunk noise has shape {noise.shape}, plan expects {expect}")
        start = time.perf_counter()
        ctx = self._ctx()
        x = noise.reshape(-1, expect[-1])
        ts = p.timesteps()
        with no_grad():
            self.stream.commit = False
            for t, t_next in zip(ts[:-1], ts[1:]):
                v = self.model(Tensor(x), float(t), c_text, ctx).data
                x = x - (t - t_next) * v
            if not np.isfinite(x).all():
                raise NonFiniteError(f"chunk {len(self.records)} produced non-finite latents")
            self.stream.commit = True
            try:
                self.model(Tensor(x), 0.0, c_text, ctx)
            finally:
                self.stream.commit = False
        self.frames_done += p.frames_per_chunk
        sizes = self.stream.bytes_by_kind()
        for k, v in sizes.items():
            self.high_water[k] = max(self.high_water[k], v)
        lin_tokens = next((st.lin.tokens for st in self.stream.states.values() if st.lin), 0)
        self.records.append(ChunkRecord(len(self.records), time.perf_counter() - start, sizes, lin_tokens))
        return x.reshape(expect)

    def generate(self, noises, c_text) -> list[np.ndarray]:
        return [self.stream_step(n, c_text) for n in noises]


def offline_generate(model: DiT, plan: ChunkPlan, noises, c_text) -> list[np.ndarray]:
    """Reference: every denoising step is a full chunk-causal forward over all frames so far,
    with finished chunks presented clean (t=0) and only the newest chunk noisy."""
    F = plan.frames_per_chunk
    c_in = model.cfg.in_channels
    clean: list[np.ndarray] = []
    ts = plan.timesteps()
    with no_grad():
        for noise in noises:
            x = np.asarray(noise, dtype=np.float64)
            frames = len(clean) * F + F
            grid = model.grid(frames, plan.height, plan.width)
            ctx = BlockContext(grid, causal=True, chunk_frames=F)
            for t, t_next in zip(ts[:-1], ts[1:]):
                seq = np.concatenate(clean + [x], axis=0).reshape(-1, c_in)
                t_frames = np.concatenate([np.zeros(frames - F), np.full(F, t)])
                v = model(Tensor(seq), t_frames, c_text, ctx).data
                x = x - (t - t_next) * v[-F * plan.height * plan.width:].reshape(x.shape)
            clean.append(x)
    return clean


def max_relative_deviation(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    num = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    den = max(float(np.max(np.abs(y))) for y in b)
    return num / max(den, 1e-30)
