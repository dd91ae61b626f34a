"""Task families, their object layouts, goals and success tolerances.

Object index 0 is always the end-effector.  Families:

  painting    [ee, brush, bucket, canvas]  dip the brush in the bucket,
              then stroke a straight line on a virtual plane 10 cm above
              the canvas.
  stacking_a  [ee, base, blockA, blockB]   3-block pyramid anchored at
              the base block.
  stacking_b  [ee, base, blockA, blockB, blockC]  4-block pyramid.
  tire        [ee, wrench, wheel]          wrench pre-attached; visit the
              four bolts, rotate at each, then move to the hub.

Goal offsets are expressed in the anchor object's frame, so random
layouts move the goals with the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("painting", "stacking_a", "stacking_b", "tire")

BLOCK_HALF = 0.02  # 4 cm cubes
GRASP_OFFSET = 0.03  # grasp point height above an object's center, object frame


@dataclass(frozen=True)
class Tolerances:
    stack_dist: float = 0.005       # block center vs desired location
    bucket_radius: float = 0.03     # dip region radius around the paint point
    plane_height: float = 0.10      # stroke plane above the canvas surface
    plane_band: float = 0.008       # |z - plane| accepted as "on the plane"
    line_length: float = 0.05       # minimum straight stroke
    line_band: float = 0.01         # lateral deviation allowed along the stroke
    line_backstep: float = 0.002    # tolerated reverse motion along the stroke
    bolt_dist: float = 0.005        # wrench-on-bolt position tolerance
    bolt_rotation: float = np.pi / 6.0  # 30 degrees, counter-clockwise
    hub_dist: float = 0.01          # wrench at the wheel center

    def validate(self):
        for name, value in self.__dict__.items():
            if not value > 0.0:
                raise ValueError(f"tolerance {name} must be strictly positive")


# family -> {block index: (anchor index, goal offset in the anchor's frame)}
# Every block's slot is anchored to the object that supports it, so each
# goal is nearest its own anchor and the target frame is unambiguous.
STACK_PATTERNS = {
    # three-block tower
    "stacking_a": {
        2: (1, (0.0, 0.0, 2 * BLOCK_HALF)),
        3: (2, (0.0, 0.0, 2 * BLOCK_HALF)),
    },
    # two two-block towers sharing the base row
    "stacking_b": {
        2: (1, (0.0, 0.0, 2 * BLOCK_HALF)),
        3: (1, (0.06, 0.0, 0.0)),
        4: (3, (0.0, 0.0, 2 * BLOCK_HALF)),
    },
}

PAINT_POINT = (0.0, 0.0, 0.0)   # in the bucket frame
CANVAS_HALF_EXTENT = 0.15
BOLT_OFFSETS = (
    (0.08, 0.0, 0.02),
    (0.0, 0.08, 0.02),
    (-0.08, 0.0, 0.02),
    (0.0, -0.08, 0.02),
)  # in the wheel frame
HUB_OFFSET = (0.0, 0.0, 0.02)

_LABELS = {
    "painting": ("ee", "brush", "bucket", "canvas"),
    "stacking_a": ("ee", "base", "blockA", "blockB"),
    "stacking_b": ("ee", "base", "blockA", "blockB", "blockC"),
    "tire": ("ee", "wrench", "wheel"),
}


@dataclass(frozen=True)
class TaskSpec:
    family: str
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family '{self.family}'")
        self.tolerances.validate()

    @property
    def labels(self) -> tuple:
        return _LABELS[self.family]

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def stack_goals(self) -> dict:
        return STACK_PATTERNS.get(self.family, {})

    @property
    def movable_blocks(self) -> tuple:
        return tuple(sorted(self.stack_goals))

    # anchor/object indices by role
    @property
    def base_index(self) -> int:
        return 1

    @property
    def brush_index(self) -> int:
        return 1

    @property
    def bucket_index(self) -> int:
        return 2

    @property
    def canvas_index(self) -> int:
        return 3

    @property
    def wrench_index(self) -> int:
        return 1

    @property
    def wheel_index(self) -> int:
        return 2


def make_spec(family: str, tolerances: Tolerances | None = None) -> TaskSpec:
    return TaskSpec(family=family, tolerances=tolerances or Tolerances())
