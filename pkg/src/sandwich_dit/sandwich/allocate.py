"""Budget-aware choice of how many LCHA vs SSA blocks to build."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass


class InfeasibleBudget(ValueError):
    """No block split satisfies the budget. ``constraints`` names what was violated."""

    def __init__(self, message: str, constraints: tuple[str, ...]):
        super().__init__(message)
        self.constraints = constraints


@dataclass(frozen=True)
class BudgetProfile:
    lat_lcha: float
    lat_ssa: float
    mem_lcha: float
    mem_ssa: float
    total_blocks: int
    lat_max: float
    mem_max: float

    def __post_init__(self):
        for name in ("lat_lcha", "lat_ssa", "mem_lcha", "mem_ssa", "lat_max", "mem_max"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"budget field {name!r} must be a positive number, got {v!r}")
        if int(self.total_blocks) != self.total_blocks or self.total_blocks < 2:
            raise ValueError(f"budget field 'total_blocks' must be an integer >= 2, got {self.total_blocks!r}")

    def cost(self, n_lcha: int) -> tuple[float, float]:
        n_ssa = self.total_blocks - n_lcha
        return (self.lat_lcha * n_lcha + self.lat_ssa * n_ssa,
                self.mem_lcha * n_lcha + self.mem_ssa * n_ssa)

    def distance(self, n_lcha: int) -> float:
        lat, mem = self.cost(n_lcha)
        return math.hypot(1.0 - lat / self.lat_max, 1.0 - mem / self.mem_max)

    def grouped(self, group_size: int) -> "BudgetProfile":
        """The same budget seen at group granularity (each unit is ``group_size`` blocks)."""
        if self.total_blocks % group_size:
            raise ValueError(f"{self.total_blocks} blocks do not split into groups of {group_size}")
        g = group_size
        return BudgetProfile(self.lat_lcha * g, self.lat_ssa * g, self.mem_lcha * g, self.mem_ssa * g,
                             self.total_blocks // g, self.lat_max, self.mem_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Allocation:
    n_lcha: int
    n_ssa: int
    latency: float
    memory: float
    distance: float

    def to_dict(self) -> dict:
        return asdict(self)


def _infeasible(p: BudgetProfile, min_lcha: int) -> InfeasibleBudget:
    lo = min_lcha
    # Costs are linear in n_lcha, so the cheapest split for each resource is an endpoint.
    lat_lo = min(p.cost(lo)[0], p.cost(p.total_blocks)[0])
    mem_lo = min(p.cost(lo)[1], p.cost(p.total_blocks)[1])
    violated = []
    if lat_lo > p.lat_max:
        violated.append(f"latency: cheapest split needs {lat_lo:g} ms > L_max={p.lat_max:g}")
    if mem_lo > p.mem_max:
        violated.append(f"memory: cheapest split needs {mem_lo:g} MB > M_max={p.mem_max:g}")
    names = tuple(v.split(":")[0] for v in violated)
    if not violated:
        names = ("latency", "memory")
        violated.append("latency and memory cannot both be met by any single split")
    floor = f" with at least {min_lcha} LCHA" if min_lcha else ""
    return InfeasibleBudget(f"infeasible budget for K={p.total_blocks}{floor}: " + "; ".join(violated), names)


def allocate_blocks(p: BudgetProfile, min_lcha: int = 0) -> Allocation:
    """Pick ``(N_LCHA, N_SSA)`` with ``N_LCHA + N_SSA = K`` inside both budgets, closest to them.

    Dynamic program over blocks: after placing ``i`` blocks the state is the LCHA count, and a
    state is dropped as soon as even filling the remaining blocks with the cheaper type would
    break a budget. Ties in distance go to the larger LCHA count.
    """
    K = p.total_blocks
    if not 0 <= min_lcha <= K:
        raise ValueError(f"min_lcha={min_lcha} outside [0, {K}]")
    cheap_lat = min(p.lat_lcha, p.lat_ssa)
    cheap_mem = min(p.mem_lcha, p.mem_ssa)
    # Pruning uses running sums; a little slack keeps rounding from dropping an exactly-tight split.
    lat_cap = p.lat_max * (1 + 1e-9)
    mem_cap = p.mem_max * (1 + 1e-9)
    states = {0: (0.0, 0.0)}
    for i in range(K):
        rest = K - i - 1
        nxt = {}
        for n, (lat, mem) in states.items():
            for is_lcha in (False, True):
                lat2 = lat + (p.lat_lcha if is_lcha else p.lat_ssa)
                mem2 = mem + (p.mem_lcha if is_lcha else p.mem_ssa)
                if lat2 + rest * cheap_lat > lat_cap or mem2 + rest * cheap_mem > mem_cap:
                    continue
                nxt.setdefault(n + is_lcha, (lat2, mem2))
        states = nxt
        if not states:
            break
    best = None
    for n in sorted(states, reverse=True):
        if n < min_lcha:
            continue
        # Re-evaluate as l*N sums so the result does not depend on accumulation order.
        lat, mem = p.cost(n)
        if lat > p.lat_max or mem > p.mem_max:
            continue
        dist = p.distance(n)
        if best is None or dist < best.distance:
            best = Allocation(n, K - n, lat, mem, dist)
    if best is None:
        raise _infeasible(p, min_lcha)
    return best
