from .experts import GenerationError, sample_layout, scripted_expert, wire_obs
from .success import SuccessReport, check_success, longest_straight_stroke
from .tasks import (
    BLOCK_HALF,
    BOLT_OFFSETS,
    FAMILIES,
    GRASP_OFFSET,
    HUB_OFFSET,
    PAINT_POINT,
    STACK_PATTERNS,
    TaskSpec,
    Tolerances,
    make_spec,
)
from .world import ActionTooLarge, KinematicWorld, SimConfig, WorldState, clip_delta

__all__ = [
    "ActionTooLarge",
    "BLOCK_HALF",
    "BOLT_OFFSETS",
    "FAMILIES",
    "GRASP_OFFSET",
    "GenerationError",
    "HUB_OFFSET",
    "KinematicWorld",
    "PAINT_POINT",
    "STACK_PATTERNS",
    "SimConfig",
    "SuccessReport",
    "TaskSpec",
    "Tolerances",
    "WorldState",
    "check_success",
    "clip_delta",
    "longest_straight_stroke",
    "make_spec",
    "sample_layout",
    "scripted_expert",
    "wire_obs",
]
