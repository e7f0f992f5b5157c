"""Offline cached distillation: teacher tuples written once, student trained from the file alone.

Cache layout (little-endian): ``b"S2KD"``, u8 version, u64 record count, then per record
u8 expert tag (0 single, 1 high, 2 low), f64 t, and four S2TN tensors: eps, x_t, teacher v,
c_text. The count is patched in place after every append.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from ..numerics import ops
from ..numerics.io import encode_tensor, read_tensor_from
from ..numerics.optim import Adam
from ..numerics.rng import Rng
from ..numerics.tensor import NonFiniteError, Tensor, no_grad
from .flow import expert_for, forward_noise, kd_loss, sample_timesteps

MAGIC = b"S2KD"
VERSION = 1
TAGS = {"single": 0, "high": 1, "low": 2}
TAG_NAMES = {v: k for k, v in TAGS.items()}
_HEADER = struct.Struct("<4sBQ")


class CacheFormatError(ValueError):
    pass


@dataclass
class DiffusionTuple:
    t: float
    eps: np.ndarray
    x_t: np.ndarray
    v: np.ndarray
    c_text: np.ndarray
    tag: str = "single"
    x0: np.ndarray | None = None   # kept in memory only, for the interpolant check

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown expert tag {self.tag!r}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"timestep {self.t} outside [0, 1]")

    def check_interpolant(self) -> bool:
        if self.x0 is None:
            raise ValueError("x0 was not retained for this tuple")
        return bool(np.array_equal(self.x_t, forward_noise(self.x0, self.t, self.eps)))

    def encode(self) -> bytes:
        head = struct.pack("<Bd", TAGS[self.tag], float(self.t))
        return head + b"".join(encode_tensor(a) for a in (self.eps, self.x_t, self.v, self.c_text))


class KdCacheWriter:
    """Append-only writer; the header count always matches the records on disk."""

    def __init__(self, path, overwrite: bool = True):
        self.path = Path(path)
        if overwrite or not self.path.exists():
            self.path.write_bytes(_HEADER.pack(MAGIC, VERSION, 0))
            self.count = 0
        else:
            self.count = _read_header(self.path)
        self._fh = open(self.path, "r+b")

    def append(self, rec: DiffusionTuple) -> None:
        for name in ("eps", "x_t", "v", "c_text"):
            if not np.isfinite(getattr(rec, name)).all():
                raise NonFiniteError(f"refusing to cache non-finite {name} (t={rec.t})")
        self._fh.seek(0, os.SEEK_END)
        self._fh.write(rec.encode())
        self.count += 1
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, VERSION, self.count))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _read_header(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated KD cache header")
    magic, version, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: not a KD cache (magic {magic!r})")
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported KD cache version {version}")
    return count


def iter_kd_cache(path) -> Iterator[DiffusionTuple]:
    count = _read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        for i in range(count):
            raw = fh.read(9)
            if len(raw) < 9:
                raise CacheFormatError(f"{path}: header says {count} records, file ends at {i}")
            tag, t = struct.unpack("<Bd", raw)
            if tag not in TAG_NAMES:
                raise CacheFormatError(f"{path}: record {i} has unknown expert tag {tag}")
            eps, x_t, v, c = (read_tensor_from(fh) for _ in range(4))
            yield DiffusionTuple(t, eps, x_t, v, c, TAG_NAMES[tag])


def read_kd_cache(path) -> list[DiffusionTuple]:
    return list(iter_kd_cache(path))


def build_kd_cache(teacher: Callable | dict, data: Iterable, rng: Rng, path, *, sampler: str = "uniform",
                   boundary: float = 0.5) -> list[DiffusionTuple]:
    """Noise each ``(x0, c_text)`` from ``data`` at a sampled t and cache the teacher's velocity.

    ``teacher`` is ``v(x_t, t, c_text) -> array``, or ``{"high": fn, "low": fn}`` for two experts
    split at ``t >= boundary``. Returns the records with ``x0`` attached.
    """
    records = []
    with KdCacheWriter(path) as writer:
        for x0, c_text in data:
            x0 = np.asarray(x0, dtype=np.float64)
            t = float(sample_timesteps(rng, 1, sampler)[0])
            eps = rng.normal(x0.shape)
            x_t = forward_noise(x0, t, eps)
            if isinstance(teacher, dict):
                tag = expert_for(t, boundary)
                fn = teacher[tag]
            else:
                tag, fn = "single", teacher
            v = np.asarray(fn(x_t, t, c_text), dtype=np.float64)
            rec = DiffusionTuple(t, eps, x_t, v, np.asarray(c_text, dtype=np.float64), tag, x0=x0)
            writer.append(rec)
            records.append(rec)
    return records


def kd_loss_two_expert(records: Iterable[DiffusionTuple], student: Callable, w_l: float = 0.5,
                       w_h: float = 0.5) -> Tensor:
    """``w_l * mean MSE(low-noise tuples) + w_h * mean MSE(high-noise tuples)``.

    ``student(x_t, t, c_text)`` returns a velocity tensor. Both expert tags must be present.
    """
    groups: dict[str, list] = {"low": [], "high": []}
    for rec in records:
        if rec.tag not in groups:
            raise ValueError(f"two-expert loss got a {rec.tag!r} tuple")
        groups[rec.tag].append(rec)
    for tag, recs in groups.items():
        if not recs:
            raise ValueError(f"two-expert loss is missing {tag}-noise tuples")
    terms = {}
    for tag, recs in groups.items():
        losses = [kd_loss(student(r.x_t, r.t, r.c_text), Tensor(r.v)) for r in recs]
        total = losses[0]
        for item in losses[1:]:
            total = ops.add(total, item)
        terms[tag] = ops.scale(total, 1.0 / len(losses))
    return ops.add(ops.scale(terms["low"], w_l), ops.scale(terms["high"], w_h))


@dataclass
class DistillResult:
    curve: list[float]
    eval_before: float
    eval_after: float


def evaluate_kd(student: Callable, records: list[DiffusionTuple]) -> float:
    with no_grad():
        return float(np.mean([kd_loss(student(r.x_t, r.t, r.c_text), Tensor(r.v)).item() for r in records]))


def distill(student_module, student: Callable, records: list[DiffusionTuple], *, steps: int = 200,
            batch_size: int = 4, lr: float = 3e-3, rng: Rng) -> DistillResult:
    """Adam on the cached-tuple MSE. ``student_module`` owns the parameters ``student`` uses."""
    if not records:
        raise ValueError("empty KD cache")
    opt = Adam(student_module.parameters(), lr=lr)
    before = evaluate_kd(student, records)
    curve = []
    queue: list[int] = []
    for step in range(steps):
        # shuffled epochs without replacement; sorted so a full-cache batch always sums in one order
        while len(queue) < batch_size:
            queue.extend(int(i) for i in rng.permutation(len(records)))
        idx, queue = sorted(queue[:batch_size]), queue[batch_size:]
        opt.zero_grad()
        total = None
        for i in idx:
            r = records[int(i)]
            term = kd_loss(student(r.x_t, r.t, r.c_text), Tensor(r.v))
            total = term if total is None else ops.add(total, term)
        loss = ops.scale(total, 1.0 / batch_size)
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"distillation loss became non-finite at step {step}")
        loss.backward()
        if lr > 0:
            opt.step()
        curve.append(loss.item())
    return DistillResult(curve, before, evaluate_kd(student, records))


def velocity_fn(model, chunk_frames: int | None = None, grad: bool = False) -> Callable:
    """Adapt a DiT to ``v(x_t[T, H, W, C], t, c_text)`` on latent-shaped arrays.

    With ``grad`` the result is a differentiable tensor; otherwise a plain array computed
    without recording a tape.
    """
    from ..attention.blocks import BlockContext

    def fn(x_t, t, c_text):
        x_t = np.asarray(x_t)
        T, H, W, C = x_t.shape
        ctx = BlockContext(model.grid(T, H, W), causal=chunk_frames is not None, chunk_frames=chunk_frames)
        x = Tensor(x_t.reshape(T * H * W, C))
        if grad:
            return ops.reshape(model(x, t, c_text, ctx), x_t.shape)
        with no_grad():
            return model(x, t, c_text, ctx).data.reshape(x_t.shape)

    return fn
