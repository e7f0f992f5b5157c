"""Routing masks and the JSON layout file."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np


def check_mask(mask, k: int | None = None) -> tuple[int, ...]:
    mask = tuple(int(b) for b in mask)
    if len(mask) < 2:
        raise ValueError(f"a routing mask needs at least 2 groups, got {len(mask)}")
    if any(b not in (0, 1) for b in mask):
        raise ValueError(f"mask entries must be 0/1: {mask}")
    if mask[0] != 1 or mask[-1] != 1:
        raise ValueError(f"first and last group must be LCHA (m_1 = m_M = 1): {mask}")
    if k is not None and sum(mask[1:-1]) != k:
        raise ValueError(f"mask {mask} has {sum(mask[1:-1])} interior LCHA groups, expected {k}")
    return mask


def enumerate_masks(M: int, k: int) -> list[tuple[int, ...]]:
    """Every legal mask: endpoints LCHA and exactly ``k`` LCHA groups inside, lexicographic order."""
    if M < 2:
        raise ValueError(f"need at least 2 groups, got M={M}")
    if not 0 <= k <= M - 2:
        raise ValueError(f"interior LCHA count k={k} outside [0, {M - 2}]")
    out = []
    for ones in itertools.combinations(range(M - 2), k):
        interior = [0] * (M - 2)
        for i in ones:
            interior[i] = 1
        out.append((1, *interior, 1))
    out.sort()
    assert len(out) == comb(M - 2, k)
    return out


def harden_mask(logits, k: int) -> tuple[int, ...]:
    """Nearest legal mask to the per-group argmax.

    ``logits`` is ``[M, 2]`` (column 1 = LCHA). Candidates are ranked by Hamming distance to the
    argmax mask, then by total log-probability, then lexicographically.
    """
    logits = np.asarray(logits, dtype=np.float64)
    M = logits.shape[0]
    raw = tuple(int(b) for b in np.argmax(logits, axis=1))
    logp = logits - np.logaddexp(logits[:, :1], logits[:, 1:])

    def rank(mask):
        hamming = sum(a != b for a, b in zip(mask[1:-1], raw[1:-1]))
        score = sum(logp[i, b] for i, b in enumerate(mask))
        return (hamming, -score, mask)

    return min(enumerate_masks(M, k), key=rank)


@dataclass
class SandwichLayout:
    groups: int
    mask: tuple[int, ...]
    group_size: int = 2
    block_configs: dict = field(default_factory=dict)
    budget: dict | None = None
    allocation: dict | None = None
    search: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = check_mask(self.mask)
        if len(self.mask) != self.groups:
            raise ValueError(f"mask length {len(self.mask)} != groups {self.groups}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.allocation is not None and "n_lcha" in self.allocation:
            if self.n_lcha != self.allocation["n_lcha"]:
                raise ValueError(f"mask gives {self.n_lcha} LCHA blocks, allocation says {self.allocation['n_lcha']}")

    @property
    def interior_lcha(self) -> int:
        return sum(self.mask[1:-1])

    @property
    def n_lcha(self) -> int:
        return self.group_size * sum(self.mask)

    @property
    def n_ssa(self) -> int:
        return self.group_size * (self.groups - sum(self.mask))

    def to_dict(self) -> dict:
        return {"M": self.groups, "k_g": self.group_size, "mask": list(self.mask),
                "block_configs": self.block_configs, "budget": self.budget,
                "allocation": self.allocation, "search": self.search}

    @classmethod
    def from_dict(cls, d: dict) -> "SandwichLayout":
        try:
            return cls(groups=int(d["M"]), mask=tuple(d["mask"]), group_size=int(d.get("k_g", 2)),
                       block_configs=dict(d.get("block_configs") or {}), budget=d.get("budget"),
                       allocation=d.get("allocation"), search=dict(d.get("search") or {}))
        except KeyError as e:
            raise ValueError(f"layout is missing field {e.args[0]!r}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SandwichLayout":
        return cls.from_dict(json.loads(Path(path).read_text()))
