"""Scripted demonstrators for the four task families.

Each expert runs a closed-loop stage plan inside the kinematic world:
every stage names the entity being driven (the end-effector or the
carried object), a world-frame target pose for it, and a completion
predicate (proximity, a grasp/release event, or a frame count for the
wrench rotations).  Per-step commands move straight toward the target
with Gaussian jitter (2 mm position, ~0.5 degree orientation) clipped to
the step bound, standing in for human demonstration noise.  Because the
entity tracks the end-effector rigidly, commanding the end-effector with
the entity's own pose error converges for both.

Alongside the frames the expert records its plan as ground-truth
sub-task labels: the (tool, target) indices of the active stage, with the
stage's final frame as the way-point frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..geometry import Pose, compose, pose_delta, quat_mul, yaw_quat
from ..trajectory import (
    Demonstration,
    Observation,
    SubTaskLabel,
    build_rel_matrix,
    wire_float,
    wire_quat,
    wire_rel_matrix,
)
from .tasks import (
    BLOCK_HALF,
    BOLT_OFFSETS,
    GRASP_OFFSET,
    HUB_OFFSET,
    PAINT_POINT,
    TaskSpec,
)
from .world import KinematicWorld, SimConfig, WorldState, clip_delta, grasp_point_world

POS_NOISE = 0.002
QUAT_NOISE = 0.004  # ~0.5 degree of orientation jitter in quaternion components
DT = 0.1
STAGE_FRAME_CAP = 400


class GenerationError(RuntimeError):
    """Random placement or stage execution failed repeatedly."""


@dataclass
class Stage:
    name: str
    tool: int
    target: int
    entity: int  # object index the controller drives (0 = end-effector)
    target_pose: Callable  # (WorldState, frame_in_stage) -> Pose
    done: Callable  # (WorldState, frame_in_stage) -> bool
    speed: float = 0.02
    quat_step: float = 0.08


def _reach(entity: int, point: Callable, eps: float):
    def done(state, _frames):
        return float(np.linalg.norm(state.pose(entity).position - point(state).position)) <= eps

    return done


def _attached_is(index):
    def done(state, _frames):
        return state.attached == index

    return done


def _sample_xy(rng, half: float) -> np.ndarray:
    return rng.uniform(-half, half, size=2)


def _flat_pose(rng, half_extent: float, z: float, yaw_range: float) -> Pose:
    xy = _sample_xy(rng, half_extent)
    yaw = rng.uniform(-yaw_range, yaw_range)
    return Pose(np.array([xy[0], xy[1], z]), yaw_quat(yaw))


def _ee_start(rng) -> Pose:
    xy = _sample_xy(rng, 0.15)
    return Pose(np.array([xy[0], xy[1], rng.uniform(0.16, 0.24)]))


def sample_layout(spec: TaskSpec, rng: np.random.Generator, config: SimConfig) -> WorldState:
    """Random feasible initial placement; raises GenerationError after 100 tries."""
    family = spec.family
    for _ in range(100):
        ee = _ee_start(rng)
        if family in ("stacking_a", "stacking_b"):
            blocks = [_flat_pose(rng, 0.22, BLOCK_HALF, 0.15) for _ in range(spec.n - 1)]
            state = WorldState(tuple([ee] + blocks), None, 0)
            world = KinematicWorld(spec, config)
            starts = [p.position[:2] for p in blocks]
            pair_ok = all(
                np.linalg.norm(starts[i] - starts[j]) >= 0.09
                for i in range(len(starts))
                for j in range(i + 1, len(starts))
            )
            if not pair_ok:
                continue
            ok = True
            goals = world.ideal_goal_poses(state)
            for gi in spec.movable_blocks:
                goal = goals[gi].position[:2]
                if np.linalg.norm(goal - state.pose(gi).position[:2]) < 0.05:
                    ok = False
                # grasp descents must stay clear of the goal area
                for other in spec.movable_blocks:
                    if other != gi and np.linalg.norm(goal - state.pose(other).position[:2]) < 0.07:
                        ok = False
            if ok:
                return state
        elif family == "painting":
            brush = _flat_pose(rng, 0.20, 0.01, 0.15)
            bucket = _flat_pose(rng, 0.20, 0.05, 0.15)
            canvas = _flat_pose(rng, 0.20, 0.005, 0.15)
            pts = [brush.position[:2], bucket.position[:2], canvas.position[:2]]
            if all(
                np.linalg.norm(pts[i] - pts[j]) >= 0.15
                for i in range(3)
                for j in range(i + 1, 3)
            ):
                return WorldState((ee, brush, bucket, canvas), None, 0)
        elif family == "tire":
            wheel = _flat_pose(rng, 0.15, 0.02, 0.4)
            wrench = compose(ee, Pose(np.array([0.0, 0.0, -0.04])))
            return WorldState((ee, wrench, wheel), spec.wrench_index, 0)
        else:
            raise GenerationError(f"no layout sampler for family '{family}'")
    raise GenerationError(f"no feasible layout for '{family}' after 100 tries")


def _offset_pose(anchor: int, offset) -> Callable:
    offset = np.asarray(offset, dtype=np.float64)

    def fn(state, _frames=0):
        return compose(state.pose(anchor), Pose(offset))

    return fn


# grasp stages aim 1.5 cm below the grasp point: attachment then always
# fires while the commanded way-point is still clearly ahead, so a policy
# imitating the switch cannot out-race the grasp region
GRASP_OVERSHOOT = 0.015


def _grasp_target(block: int):
    def fn(state, _frames=0):
        point = grasp_point_world(state.pose(block)) - np.array([0.0, 0.0, GRASP_OVERSHOOT])
        return Pose(point, state.ee.orientation)

    return fn


def _stages_stacking(spec: TaskSpec, world: KinematicWorld) -> list:
    stages = []
    for block in spec.movable_blocks:
        anchor = spec.stack_goals[block][0]

        def lift(state, _frames=0, b=block):
            return compose(world.goal_pose_world(state, b), Pose(np.array([0.0, 0.0, 0.10])))

        def place(state, _frames=0, b=block):
            return world.goal_pose_world(state, b)

        stages += [
            Stage(f"grasp_{block}", 0, block, 0, _grasp_target(block),
                  _attached_is(block), speed=0.018),
            Stage(f"carry_{block}", block, anchor, block, lift,
                  _reach(block, lambda s, f=lift: f(s), 0.015)),
            Stage(f"place_{block}", block, anchor, block, place,
                  _attached_is(None), speed=0.015),
        ]
    return stages


def _stages_painting(spec: TaskSpec, world: KinematicWorld) -> list:
    brush, bucket, canvas = spec.brush_index, spec.bucket_index, spec.canvas_index
    tol = spec.tolerances
    paint = _offset_pose(bucket, PAINT_POINT)
    above_paint = _offset_pose(bucket, np.array(PAINT_POINT) + [0.0, 0.0, 0.10])
    line_a = _offset_pose(canvas, [-0.035, 0.0, tol.plane_height])
    line_b = _offset_pose(canvas, [0.035, 0.0, tol.plane_height])

    return [
        Stage("grasp_brush", 0, brush, 0, _grasp_target(brush),
              _attached_is(brush), speed=0.018),
        Stage("above_bucket", brush, bucket, brush, above_paint,
              _reach(brush, lambda s: above_paint(s), 0.015)),
        Stage("dip", brush, bucket, brush, paint,
              _reach(brush, lambda s: paint(s), 0.012), speed=0.015),
        Stage("raise", brush, bucket, brush, above_paint,
              _reach(brush, lambda s: above_paint(s), 0.015)),
        Stage("line_start", brush, canvas, brush, line_a,
              _reach(brush, lambda s: line_a(s), 0.006), speed=0.015),
        Stage("draw", brush, canvas, brush, line_b,
              _reach(brush, lambda s: line_b(s), 0.006), speed=0.01),
    ]


def _stages_tire(spec: TaskSpec, world: KinematicWorld) -> list:
    # slow rotation: jitter breaks the 5 mm in-tolerance accumulation on
    # ~20% of frame pairs, so command 75 degrees at 2.5 degrees per frame
    wrench, wheel = spec.wrench_index, spec.wheel_index
    rate = np.deg2rad(2.5)
    total = np.deg2rad(75.0)
    rot_frames = int(np.ceil(total / rate)) + 6
    stages = []
    for b, offset in enumerate(BOLT_OFFSETS):
        at_bolt = _offset_pose(wheel, offset)
        above = _offset_pose(wheel, np.asarray(offset) + [0.0, 0.0, 0.06])
        stages.append(Stage(f"above_bolt_{b}", wrench, wheel, wrench, above,
                            _reach(wrench, lambda s, f=above: f(s), 0.01)))
        stages.append(Stage(f"at_bolt_{b}", wrench, wheel, wrench, at_bolt,
                            _reach(wrench, lambda s, f=at_bolt: f(s), 0.002), speed=0.01))

        def rotate(state, frames, f=at_bolt, start={}):
            if "q" not in start:
                start["q"] = state.pose(wrench).orientation
            progress = min(total, rate * frames)
            return Pose(f(state).position, quat_mul(yaw_quat(progress), start["q"]))

        stages.append(Stage(f"rotate_bolt_{b}", wrench, wheel, wrench, rotate,
                            lambda s, frames, rf=rot_frames: frames >= rf, speed=0.01))
        stages.append(Stage(f"lift_bolt_{b}", wrench, wheel, wrench, above,
                            _reach(wrench, lambda s, f=above: f(s), 0.01)))
    hub = _offset_pose(wheel, HUB_OFFSET)
    pull = _offset_pose(wheel, np.asarray(HUB_OFFSET) + [0.0, 0.0, 0.08])
    stages.append(Stage("hub", wrench, wheel, wrench, hub,
                        _reach(wrench, lambda s: hub(s), 0.004), speed=0.01))
    stages.append(Stage("pull", wrench, wheel, wrench, pull,
                        _reach(wrench, lambda s: pull(s), 0.01)))
    return stages


_STAGE_BUILDERS = {
    "stacking_a": _stages_stacking,
    "stacking_b": _stages_stacking,
    "painting": _stages_painting,
    "tire": _stages_tire,
}


def wire_obs(state: WorldState, labels: tuple, timestamp: float) -> Observation:
    """Build a wire-stable Observation from world poses."""
    poses = [
        Pose(np.array([wire_float(v) for v in p.position]), wire_quat(p.orientation))
        for p in state.object_world_poses
    ]
    rel = wire_rel_matrix(build_rel_matrix(poses))
    return Observation(
        end_effector=poses[0], labels=labels, rel=rel, timestamp=wire_float(timestamp)
    )


def scripted_expert(
    spec: TaskSpec,
    seed: int,
    config: SimConfig | None = None,
    initial_state: WorldState | None = None,
) -> Demonstration:
    """Roll one noisy scripted demonstration; returns labels as ground truth."""
    config = config or SimConfig()
    rng = np.random.default_rng(seed)
    world = KinematicWorld(spec, config)
    state = initial_state if initial_state is not None else sample_layout(spec, rng, config)
    state = WorldState(state.object_world_poses, state.attached, seed)
    stages = _STAGE_BUILDERS[spec.family](spec, world)

    frames = [wire_obs(state, spec.labels, 0.0)]
    stage_of_frame = [0]

    for s_idx, stage in enumerate(stages):
        in_stage = 0
        while not stage.done(state, in_stage):
            if in_stage >= STAGE_FRAME_CAP:
                raise GenerationError(
                    f"{spec.family} seed {seed}: stage '{stage.name}' never completed"
                )
            target = stage.target_pose(state, in_stage)
            delta = pose_delta(target.vec7, state.pose(stage.entity).vec7)
            delta = clip_delta(delta, stage.speed)
            qn = float(np.linalg.norm(delta[3:]))
            if qn > stage.quat_step:
                delta[3:] *= stage.quat_step / qn
            delta[:3] += rng.normal(0.0, POS_NOISE, size=3)
            delta[3:] += rng.normal(0.0, QUAT_NOISE, size=4)
            delta = clip_delta(delta, config.max_step)
            state = world.step(state, delta)
            stage_of_frame.append(s_idx)
            frames.append(wire_obs(state, spec.labels, DT * (len(frames))))
            in_stage += 1

    H = len(frames)
    if H < 2:
        raise GenerationError(f"{spec.family} seed {seed}: empty demonstration")

    last_frame_of_stage: dict = {}
    for f_idx, s_idx in enumerate(stage_of_frame):
        last_frame_of_stage[s_idx] = f_idx
    gt = []
    for f_idx in range(H):
        stage = stages[stage_of_frame[f_idx]]
        wp = max(f_idx, last_frame_of_stage[stage_of_frame[f_idx]])
        gt.append(SubTaskLabel(stage.tool, stage.target, wp))

    return Demonstration(frames=tuple(frames), task_id=spec.family, ground_truth=tuple(gt))
