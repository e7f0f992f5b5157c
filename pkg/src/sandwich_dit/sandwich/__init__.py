"""Block allocation, two-stream routing, mask search and the desk-scale model."""

from .allocate import Allocation, BudgetProfile, InfeasibleBudget, allocate_blocks
from .check import group_grad_check
from .layout import SandwichLayout, check_mask, enumerate_masks, harden_mask
from .model import (
    DiT,
    FullStack,
    ModelConfig,
    SandwichBody,
    build_sandwich,
    build_teacher,
    inherit_from_teacher,
    timestep_features,
)
from .routing import GroupTrace, RouteTrace, gumbel_ste_sample, routed_forward, sample_mask, self_distill_loss, triggers
from .search import SearchResult, SearchSchedule, layout_from_search, plan_groups, search

__all__ = [
    "Allocation", "BudgetProfile", "InfeasibleBudget", "allocate_blocks", "SandwichLayout", "check_mask",
    "enumerate_masks", "harden_mask", "DiT", "FullStack", "ModelConfig", "SandwichBody", "build_sandwich",
    "build_teacher", "inherit_from_teacher", "timestep_features", "GroupTrace", "RouteTrace",
    "gumbel_ste_sample", "routed_forward", "sample_mask", "self_distill_loss", "triggers", "SearchResult",
    "SearchSchedule", "layout_from_search", "plan_groups", "search", "group_grad_check",
]
