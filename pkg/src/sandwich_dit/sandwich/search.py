"""Routing-mask search: Gumbel-STE logits co-trained with block weights by self-distillation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..numerics import ops
from ..numerics.optim import Adam
from ..numerics.rng import Rng
from ..numerics.tensor import NonFiniteError, no_grad
from .allocate import Allocation, BudgetProfile, allocate_blocks
from .layout import SandwichLayout, enumerate_masks, harden_mask
from .routing import _bit, sample_mask, self_distill_loss


@dataclass(frozen=True)
class SearchSchedule:
    steps: int = 60
    lr_logits: float = 0.2
    lr_weights: float = 1e-3
    tau_start: float = 1.0
    tau_end: float = 0.1
    train_weights: bool = True
    legal_samples: bool = True
    mask_samples: int = 1

    def temperature(self, step: int) -> float:
        if self.steps <= 1:
            return self.tau_end
        frac = step / (self.steps - 1)
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


@dataclass
class SearchResult:
    mask: tuple[int, ...]
    logits: np.ndarray
    losses: list[float] = field(default_factory=list)
    masks_seen: list[tuple[int, ...]] = field(default_factory=list)
    candidates: int = 0


def plan_groups(profile: BudgetProfile, group_size: int) -> tuple[Allocation, int, int]:
    """Allocate at group granularity; returns ``(allocation, M, k)`` with ``k`` interior LCHA groups.

    The first and last groups are always LCHA, so at least two LCHA groups are required.
    """
    grouped = profile.grouped(group_size)
    alloc = allocate_blocks(grouped, min_lcha=2)
    block_alloc = Allocation(alloc.n_lcha * group_size, alloc.n_ssa * group_size, alloc.latency, alloc.memory,
                             alloc.distance)
    return block_alloc, grouped.total_blocks, alloc.n_lcha - 2


def search(student, teacher: Callable, batches: Iterable, k: int, schedule: SearchSchedule, rng: Rng) -> SearchResult:
    """Train routing logits (and, by default, weights) of ``student`` against ``teacher``.

    ``student`` is a DiT whose body is a :class:`SandwichBody`. Each batch is a tuple
    ``(x, t_frames, c_text, ctx)``; the teacher's output on the same batch is the target.
    The logits are hardened to the most probable legal mask at the end.
    """
    body = student.body
    M = body.cfg.groups
    candidates = enumerate_masks(M, k)
    if len(candidates) == 1:
        return SearchResult(candidates[0], body.logits.data.copy(), candidates=1)
    logit_opt = Adam([body.logits], lr=schedule.lr_logits)
    weights = [p for name, p in student.named_parameters().items() if name != "body.logits"]
    weight_opt = Adam(weights, lr=schedule.lr_weights) if schedule.train_weights else None
    result = SearchResult(candidates[0], body.logits.data, candidates=len(candidates))
    it = iter(batches)
    for step in range(schedule.steps):
        x, t_frames, c_text, ctx = next(it)
        with no_grad():
            target = teacher(x, t_frames, c_text, ctx)
        student.zero_grad()
        total = 0.0
        for _ in range(schedule.mask_samples):
            mask = sample_mask(body.logits, schedule.temperature(step), rng, k if schedule.legal_samples else None)
            out = student(x, t_frames, c_text, ctx, mask=mask)
            loss = ops.scale(self_distill_loss(out, target), 1.0 / schedule.mask_samples)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"self-distillation loss became non-finite at step {step}")
            loss.backward()
            total += loss.item()
            result.masks_seen.append(tuple(_bit(m) for m in mask))
        logit_opt.step()
        if weight_opt is not None:
            weight_opt.step()
        result.losses.append(total)
    result.logits = body.logits.data.copy()
    result.mask = harden_mask(result.logits, k)
    return result


def layout_from_search(result: SearchResult, group_size: int, model_cfg: dict, budget: BudgetProfile | None,
                       allocation: Allocation | None, schedule: SearchSchedule | None, seed: int) -> SandwichLayout:
    meta = {"seed": seed, "candidates": result.candidates, "logits": np.asarray(result.logits).tolist(),
            "final_loss": result.losses[-1] if result.losses else None, "steps": len(result.losses)}
    if schedule is not None:
        meta["schedule"] = asdict(schedule)
    return SandwichLayout(groups=len(result.mask), mask=result.mask, group_size=group_size,
                          block_configs=model_cfg, budget=budget.to_dict() if budget else None,
                          allocation=allocation.to_dict() if allocation else None, search=meta)
