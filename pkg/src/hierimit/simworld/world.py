"""Deterministic kinematic world: pose-delta actions, rigid attachment.

The world applies 7-vector end-effector deltas (component-wise add, then
quaternion renormalization -- the same convention as pose_delta) and runs
the per-family grasp/release rules:

  * grasp fires when nothing is attached and the end-effector is within
    grasp_radius of an eligible object's grasp point,
  * stacking blocks release when carried to within release tolerances of
    their goal pose; once at their goal they stop being graspable,
  * the brush never releases; the tire wrench starts attached and is not
    managed by the rules at all.

There is no dynamics and no contact: unattached objects simply stay put.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..geometry import Pose, add_delta, compose, relative_pose
from .tasks import GRASP_OFFSET, TaskSpec


class ActionTooLarge(ValueError):
    """Position part of an action exceeded the configured step bound."""


@dataclass(frozen=True)
class SimConfig:
    max_step: float = 0.05        # bound on an action's position norm, meters
    grasp_radius: float = 0.02
    release_dist: float = 0.004   # carried object this close to its goal lets go
    release_angle: float = 0.20   # orientation gate for release, radians
    table_height: float = 0.0
    workspace: float = 0.6        # half-extent of the allowed x/y box


@dataclass(frozen=True)
class WorldState:
    """Immutable snapshot; index 0 of object_world_poses is the end-effector."""

    object_world_poses: tuple
    attached: Optional[int]
    rng_seed: int

    @property
    def ee(self) -> Pose:
        return self.object_world_poses[0]

    def pose(self, i: int) -> Pose:
        return self.object_world_poses[i]


def quat_angle(qa: np.ndarray, qb: np.ndarray) -> float:
    """Rotation angle between two unit quaternions, radians."""
    dot = abs(float(np.dot(qa, qb)))
    return 2.0 * float(np.arccos(min(1.0, dot)))


def grasp_point_world(pose: Pose) -> np.ndarray:
    return compose(pose, Pose(np.array([0.0, 0.0, GRASP_OFFSET]))).position


class KinematicWorld:
    """step() and the family rules, bound to one task spec + sim config."""

    def __init__(self, spec: TaskSpec, config: SimConfig | None = None):
        self.spec = spec
        self.config = config or SimConfig()

    def goal_pose_world(self, state: WorldState, block: int) -> Pose:
        """World goal pose of a stacking block, through its anchor's current pose."""
        anchor, offset = self.spec.stack_goals[block]
        return compose(state.pose(anchor), Pose(np.array(offset)))

    def ideal_goal_poses(self, state: WorldState) -> dict:
        """Pattern slots chained from the base, ignoring where blocks sit now."""
        goals: dict = {}
        for block in self.spec.movable_blocks:
            anchor, offset = self.spec.stack_goals[block]
            root = goals.get(anchor, state.pose(anchor))
            goals[block] = compose(root, Pose(np.array(offset)))
        return goals

    def at_goal(self, state: WorldState, block: int) -> bool:
        goal = self.goal_pose_world(state, block)
        pose = state.pose(block)
        return (
            float(np.linalg.norm(pose.position - goal.position)) <= self.config.release_dist
            and quat_angle(pose.orientation, goal.orientation) <= self.config.release_angle
        )

    def graspable(self, state: WorldState, i: int) -> bool:
        family = self.spec.family
        if family in ("stacking_a", "stacking_b"):
            return i in self.spec.stack_goals and not self.at_goal(state, i)
        if family == "painting":
            return i == self.spec.brush_index
        return False  # tire: the wrench is pre-attached, nothing else grasps

    def step(self, state: WorldState, action: np.ndarray) -> WorldState:
        """Apply one end-effector pose delta; returns the next state."""
        action = np.asarray(action, dtype=np.float64).reshape(7)
        step_len = float(np.linalg.norm(action[:3]))
        if step_len > self.config.max_step + 1e-12:
            raise ActionTooLarge(f"position step {step_len:.4f} > {self.config.max_step}")
        new_q = state.ee.orientation + action[3:]
        if float(np.linalg.norm(new_q)) < 1e-6:
            raise ActionTooLarge("quaternion part of the action is not renormalizable")

        poses = list(state.object_world_poses)
        new_ee = add_delta(state.ee, action)
        poses[0] = new_ee
        attached = state.attached
        if attached is not None:
            rel = relative_pose(state.pose(attached), state.ee)
            poses[attached] = compose(new_ee, rel)

        next_state = WorldState(tuple(poses), attached, state.rng_seed)

        # release, then grasp, both after the motion
        if attached is not None and self.spec.family in ("stacking_a", "stacking_b"):
            if self.at_goal(next_state, attached):
                next_state = replace(next_state, attached=None)
        if next_state.attached is None:
            ee_pos = next_state.ee.position
            for i in range(1, self.spec.n):
                if not self.graspable(next_state, i):
                    continue
                if float(np.linalg.norm(ee_pos - grasp_point_world(next_state.pose(i)))) <= self.config.grasp_radius:
                    next_state = replace(next_state, attached=i)
                    break
        return next_state

def clip_delta(delta: np.ndarray, max_step: float) -> np.ndarray:
    """Scale a 7-vector pose delta so the position block has norm <= max_step."""
    delta = np.asarray(delta, dtype=np.float64).copy()
    step_len = float(np.linalg.norm(delta[..., :3]))
    if step_len > max_step:
        delta *= max_step / step_len
    return delta
