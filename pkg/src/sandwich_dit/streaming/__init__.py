"""Chunked streaming inference with fixed-size caches, plus footprint and latency models."""

from .engine import ChunkPlan, StreamEngine, make_states, max_relative_deviation, offline_generate, route_blocks
from .footprint import FootprintReport, cache_footprint
from .latency import Components, DeviceProfile, ProfileError, latency_model, load_profile, parse_profile
from .state import BlockState, ConvRing, LinAttnState, SsaKvWindow, StreamContext

__all__ = [
    "ChunkPlan", "StreamEngine", "make_states", "max_relative_deviation", "offline_generate", "route_blocks",
    "FootprintReport", "cache_footprint", "Components", "DeviceProfile", "ProfileError", "latency_model",
    "load_profile", "parse_profile", "BlockState", "ConvRing", "LinAttnState", "SsaKvWindow", "StreamContext",
]
