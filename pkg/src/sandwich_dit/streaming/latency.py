"""Per-chunk latency / throughput projection and the device profile file."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..sandwich.allocate import BudgetProfile


class ProfileError(ValueError):
    """Malformed device profile; the message names the offending field."""


def latency_model(text_ms: float, dit_ms: float, decoder_ms: float, steps: int, frames: int) -> tuple[float, float]:
    """``chunk_ms = text + steps * dit + decoder`` and ``fps = frames / (chunk_ms / 1000)``."""
    for name, v in (("text_ms", text_ms), ("dit_ms", dit_ms), ("decoder_ms", decoder_ms)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    if steps < 1 or frames < 1:
        raise ValueError("steps and frames must be >= 1")
    chunk_ms = text_ms + steps * dit_ms + decoder_ms
    if chunk_ms <= 0:
        raise ValueError("chunk latency must be positive")
    return chunk_ms, frames / (chunk_ms / 1000.0)


@dataclass(frozen=True)
class Components:
    text_encoder_ms: float
    dit_step_ms: float
    decoder_ms: float
    steps: int
    pixel_frames_per_chunk: int

    def project(self) -> tuple[float, float]:
        return latency_model(self.text_encoder_ms, self.dit_step_ms, self.decoder_ms, self.steps,
                             self.pixel_frames_per_chunk)


@dataclass(frozen=True)
class DeviceProfile:
    budget: BudgetProfile
    components: Components | None


def _num(d: dict, path: str, integer: bool = False, positive: bool = True):
    node = d
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ProfileError(f"device profile is missing field {path!r}")
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ProfileError(f"device profile field {path!r} must be a number, got {node!r}")
    if integer and int(node) != node:
        raise ProfileError(f"device profile field {path!r} must be an integer, got {node!r}")
    if positive and not node > 0:
        raise ProfileError(f"device profile field {path!r} must be positive, got {node!r}")
    return int(node) if integer else float(node)


def parse_profile(d: dict) -> DeviceProfile:
    if not isinstance(d, dict):
        raise ProfileError("device profile must be a JSON object")
    try:
        budget = BudgetProfile(
            lat_lcha=_num(d, "blocks.lcha.latency_ms"), lat_ssa=_num(d, "blocks.ssa.latency_ms"),
            mem_lcha=_num(d, "blocks.lcha.memory_mb"), mem_ssa=_num(d, "blocks.ssa.memory_mb"),
            total_blocks=_num(d, "total_blocks", integer=True), lat_max=_num(d, "latency_budget_ms"),
            mem_max=_num(d, "memory_budget_mb"))
    except ProfileError:
        raise
    except ValueError as e:
        raise ProfileError(str(e)) from None
    comps = None
    if "components" in d:
        comps = Components(_num(d, "components.text_encoder_ms", positive=False),
                           _num(d, "components.dit_step_ms"),
                           _num(d, "components.decoder_ms", positive=False),
                           _num(d, "components.steps", integer=True),
                           _num(d, "components.pixel_frames_per_chunk", integer=True))
    return DeviceProfile(budget, comps)


def load_profile(path) -> DeviceProfile:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ProfileError(f"device profile {path} is not valid JSON: {e}") from None
    return parse_profile(raw)
