"""Two-stream routing between high-res LCHA groups and low-res SSA groups.

Streams ``y_L`` (high-res) and ``y_S`` (low-res) plus a long-skip buffer ``S`` are threaded
through ``M`` groups. A group with ``m_n = 1`` runs its LCHA branch on ``y_L``; ``m_n = 0`` runs
its SSA branch on ``y_S``. Switching streams up/down-samples, and ``S`` remembers the high-res
feature at every LCHA -> SSA switch so it can be added back on the way up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import ops
from ..numerics.rng import Rng
from ..numerics.tensor import Tensor


def triggers(m_prev, m_cur):
    """``(u, d)``: u marks an SSA -> LCHA switch, d an LCHA -> SSA switch.

    Bits give ints; tensors (soft masks) give differentiable ``relu`` differences.
    """
    if isinstance(m_prev, Tensor) or isinstance(m_cur, Tensor):
        return ops.relu(ops.sub(m_cur, m_prev)), ops.relu(ops.sub(m_prev, m_cur))
    m_prev, m_cur = int(m_prev), int(m_cur)
    if m_prev not in (0, 1) or m_cur not in (0, 1):
        raise ValueError(f"mask bits must be 0/1, got ({m_prev}, {m_cur})")
    return max(m_cur - m_prev, 0), max(m_prev - m_cur, 0)


def gumbel_ste_sample(logits, temperature: float, rng: Rng, noise=None) -> tuple[Tensor, Tensor]:
    """Gumbel-softmax over ``logits[2]`` (index 1 = LCHA).

    Returns ``(hard, soft)``: ``hard`` is exactly 0 or 1 in the forward pass and back-propagates
    through ``soft``, the relaxed probability of index 1.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    g = rng.gumbel(logits.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    perturbed = ops.add(logits, g)
    probs = ops.softmax(ops.scale(perturbed, 1.0 / temperature))
    soft = ops.reshape(ops.take(probs, [1], axis=-1), ())
    hard = float(np.argmax(perturbed.data) == 1)
    return ops.straight_through(soft, hard), soft


@dataclass
class GroupTrace:
    group: int
    m: int
    u: int
    d: int
    branch: str
    y_L: np.ndarray | None
    y_S: np.ndarray | None
    S: np.ndarray | None


@dataclass
class RouteTrace:
    groups: list[GroupTrace] = field(default_factory=list)
    calls: dict = field(default_factory=lambda: {"down": 0, "up": 0, "lcha": 0, "ssa": 0})

    def bump(self, key: str) -> None:
        self.calls[key] += 1


def _bit(m) -> int:
    return int(round(float(m.data))) if isinstance(m, Tensor) else int(m)


def _snap(t):
    return None if t is None else t.data.copy()


def routed_forward(body, x, cond, ctx, mask, *, trace: RouteTrace | None = None) -> Tensor:
    """Run ``body`` (a :class:`SandwichBody`) on high-res tokens ``x`` under ``mask``.

    ``mask`` entries are bits (hard routing: only the selected branch and the needed
    resampling run) or scalar tensors from :func:`gumbel_ste_sample` (soft routing: both
    branches run and are blended so gradients reach the mask).
    """
    M = len(body.lcha)
    if len(mask) != M:
        raise ValueError(f"mask has {len(mask)} entries for {M} groups")
    grid = ctx.grid
    low_grid = grid.downsample(body.stride, body.low_width)
    low_ctx = ctx.on_grid(low_grid)
    trace = trace if trace is not None else RouteTrace()

    def down(n, y):
        trace.bump("down")
        return body.down[n](y, grid)[0]

    def up(n, y):
        trace.bump("up")
        return body.up[n](y, low_grid)[0]

    def run_l(n, y):
        trace.bump("lcha")
        return body.lcha[n](y, cond, ctx)

    def run_s(n, y):
        trace.bump("ssa")
        return body.ssa[n](y, cond, low_ctx)

    y_l, y_s, skip = x, None, None   # y_S^0 = down_1(x) and S^0 = 0 are materialized lazily
    m_prev = 1
    for n in range(M):
        m = mask[n]
        soft = isinstance(m, Tensor) or isinstance(m_prev, Tensor)
        u, d = triggers(m_prev, m)
        if not soft:
            if m == 1:
                x_l = ops.add(up(n, y_s), skip if skip is not None else 0.0) if u else y_l
                y_l = run_l(n, x_l)
                branch = "L"
            else:
                if d:
                    x_s = down(n, y_l)
                    skip = y_l
                else:
                    x_s = y_s if y_s is not None else down(0, x)
                y_s = run_s(n, x_s)
                branch = "S"
        else:
            if y_s is None:
                y_s = down(0, x)
            if skip is None:
                skip = Tensor(np.zeros(y_l.shape, dtype=y_l.dtype))
            x_l = ops.add(ops.mul(ops.sub(1.0, u), y_l), ops.mul(u, ops.add(up(n, y_s), skip)))
            x_s = ops.add(ops.mul(ops.sub(1.0, d), y_s), ops.mul(d, down(n, y_l)))
            t_l, t_s = run_l(n, x_l), run_s(n, x_s)
            skip = ops.add(ops.mul(d, y_l), ops.mul(ops.sub(1.0, d), skip))
            y_l, y_s = (ops.add(ops.mul(m, t_l), ops.mul(ops.sub(1.0, m), y_l)),
                        ops.add(ops.mul(ops.sub(1.0, m), t_s), ops.mul(m, y_s)))
            branch = "L+S"
        trace.groups.append(GroupTrace(n, _bit(m), _bit(u), _bit(d), branch, _snap(y_l), _snap(y_s), _snap(skip)))
        m_prev = m
    m_last = mask[-1]
    if not isinstance(m_last, Tensor):
        return y_l if m_last == 1 else up(M - 1, y_s)
    return ops.add(ops.mul(m_last, y_l), ops.mul(ops.sub(1.0, m_last), up(M - 1, y_s)))


def sample_mask(logits: Tensor, temperature: float, rng: Rng, k: int | None = None) -> list:
    """One soft mask: endpoints pinned to 1, interior groups drawn with Gumbel-STE.

    With ``k`` the hard forward bits are the ``k`` interior groups with the largest perturbed
    LCHA margin, so every sample is a legal mask; the backward path is the same per-group soft
    relaxation either way.
    """
    M = logits.shape[0]
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    noise = rng.gumbel((M, 2))
    bits = {}
    if k is not None:
        margins = (logits.data + noise)[1:-1] @ np.array([-1.0, 1.0])
        order = np.argsort(-margins, kind="stable")
        bits = {int(i) + 1: float(j < k) for j, i in enumerate(order)}
    mask: list = [1]
    for n in range(1, M - 1):
        row = ops.reshape(ops.take(logits, [n], axis=0), (2,))
        hard, soft = gumbel_ste_sample(row, temperature, rng, noise=noise[n])
        mask.append(ops.straight_through(soft, bits[n]) if n in bits else hard)
    mask.append(1)
    return mask


def self_distill_loss(student_out, teacher_out) -> Tensor:
    """Mean squared error between the routed student output and the teacher output."""
    if tuple(student_out.shape) != tuple(teacher_out.shape):
        raise ValueError(f"shape mismatch: student {tuple(student_out.shape)} vs teacher {tuple(teacher_out.shape)}")
    return ops.mse(student_out, teacher_out)
