"""Per-family success scoring of a demonstration trajectory.

Paper-facing thresholds live in Tolerances: 0.5 cm stacking placement,
3 cm dip region / 10 cm stroke plane / 5 cm stroke length for painting,
5 mm bolt tolerance and 30 degrees of counter-clockwise rotation for the
tire task.  Each checker reports the first sub-criterion that failed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose, compose, quat_rotate, yaw_of
from ..trajectory import Demonstration
from .tasks import BOLT_OFFSETS, HUB_OFFSET, PAINT_POINT, CANVAS_HALF_EXTENT, TaskSpec


@dataclass
class SuccessReport:
    success: bool
    failure: str | None = None
    metrics: dict = field(default_factory=dict)

    def __bool__(self):
        return self.success


def _world_positions(demo: Demonstration, index: int) -> np.ndarray:
    return np.stack([f.world_pose(index).position for f in demo.frames])


def _world_pose_seq(demo: Demonstration, index: int) -> list:
    return [f.world_pose(index) for f in demo.frames]


def check_success(spec: TaskSpec, demo: Demonstration) -> SuccessReport:
    if tuple(demo.labels) != tuple(spec.labels):
        return SuccessReport(False, f"label mismatch: {demo.labels} != {spec.labels}")
    family = spec.family
    if family in ("stacking_a", "stacking_b"):
        return _check_stacking(spec, demo)
    if family == "painting":
        return _check_painting(spec, demo)
    if family == "tire":
        return _check_tire(spec, demo)
    return SuccessReport(False, f"no checker for family '{family}'")


def _check_stacking(spec: TaskSpec, demo: Demonstration) -> SuccessReport:
    tol = spec.tolerances.stack_dist
    final = demo.frames[-1]
    metrics = {}
    for block, (anchor, offset) in sorted(spec.stack_goals.items()):
        desired = compose(final.world_pose(anchor), Pose(np.array(offset))).position
        dist = float(np.linalg.norm(final.world_pose(block).position - desired))
        metrics[f"block_{block}_dist"] = dist
        if dist > tol:
            return SuccessReport(
                False,
                f"block {block} center {dist * 100:.2f} cm from its desired location"
                f" (stacking tolerance {tol * 100:.1f} cm)",
                metrics,
            )
    return SuccessReport(True, None, metrics)


def longest_straight_stroke(points: np.ndarray, band: float, backstep: float) -> float:
    """Longest monotone straight segment through an ordered 2-D point run.

    A chord (i, j) counts when every intermediate point stays within
    `band` of the chord line and projections advance monotonically up to
    `backstep` of allowed regression.
    """
    m = len(points)
    best = 0.0
    for i in range(m - 1):
        deltas = points[i + 1 :] - points[i]
        lengths = np.linalg.norm(deltas, axis=1)
        for jo in range(len(deltas) - 1, -1, -1):
            L = lengths[jo]
            if L <= best or L == 0.0:
                continue
            u = deltas[jo] / L
            seg = points[i : i + jo + 2] - points[i]
            proj = seg @ u
            lateral = np.abs(seg @ np.array([-u[1], u[0]]))
            if lateral.max() <= band and np.all(np.diff(proj) >= -backstep):
                best = max(best, float(L))
                break  # longer chords from i were already rejected or shorter
    return best


def _check_painting(spec: TaskSpec, demo: Demonstration) -> SuccessReport:
    tol = spec.tolerances
    brush = _world_positions(demo, spec.brush_index)
    bucket = _world_pose_seq(demo, spec.bucket_index)
    canvas = _world_pose_seq(demo, spec.canvas_index)
    paint = np.stack([compose(p, Pose(np.array(PAINT_POINT))).position for p in bucket])

    dip_dist = np.linalg.norm(brush - paint, axis=1)
    metrics = {"min_dip_dist": float(dip_dist.min())}
    dipped = np.nonzero(dip_dist <= tol.bucket_radius)[0]
    if len(dipped) == 0:
        return SuccessReport(
            False,
            f"brush never entered the {tol.bucket_radius * 100:.0f} cm bucket region"
            f" (closest {dip_dist.min() * 100:.1f} cm)",
            metrics,
        )
    t1 = int(dipped[0])

    # brush in each frame's canvas coordinates
    local = []
    for t, c in enumerate(canvas):
        inv_q = c.orientation * np.array([1.0, -1.0, -1.0, -1.0])
        local.append(quat_rotate(inv_q, brush[t] - c.position))
    local = np.stack(local)
    on_plane = (
        (np.abs(local[:, 2] - tol.plane_height) <= tol.plane_band)
        & (np.abs(local[:, 0]) <= CANVAS_HALF_EXTENT)
        & (np.abs(local[:, 1]) <= CANVAS_HALF_EXTENT)
    )
    on_plane[: t1 + 1] = False
    metrics["plane_frames"] = int(on_plane.sum())
    if not on_plane.any():
        return SuccessReport(
            False,
            f"brush never reached the plane {tol.plane_height * 100:.0f} cm above the canvas"
            " after dipping",
            metrics,
        )

    # longest straight stroke inside contiguous on-plane runs
    best = 0.0
    t = 0
    H = len(on_plane)
    while t < H:
        if not on_plane[t]:
            t += 1
            continue
        end = t
        while end < H and on_plane[end]:
            end += 1
        run = local[t:end, :2]
        if len(run) >= 2:
            best = max(best, longest_straight_stroke(run, tol.line_band, tol.line_backstep))
        t = end
    metrics["stroke_length"] = best
    if best < tol.line_length:
        return SuccessReport(
            False,
            f"longest straight stroke {best * 100:.1f} cm is shorter than"
            f" {tol.line_length * 100:.0f} cm",
            metrics,
        )
    return SuccessReport(True, None, metrics)


def _check_tire(spec: TaskSpec, demo: Demonstration) -> SuccessReport:
    tol = spec.tolerances
    wrench_pose = _world_pose_seq(demo, spec.wrench_index)
    wheel = _world_pose_seq(demo, spec.wheel_index)
    wrench = np.stack([p.position for p in wrench_pose])
    yaw = np.array([yaw_of(p.orientation) for p in wrench_pose])
    metrics = {}
    completion = []
    for b, offset in enumerate(BOLT_OFFSETS):
        bolt = np.stack([compose(w, Pose(np.array(offset))).position for w in wheel])
        in_tol = np.linalg.norm(wrench - bolt, axis=1) <= tol.bolt_dist
        dyaw = np.diff(yaw)
        dyaw = (dyaw + np.pi) % (2.0 * np.pi) - np.pi
        counted = np.where(in_tol[:-1] & in_tol[1:], dyaw, 0.0)
        cumulative = np.concatenate([[0.0], np.cumsum(counted)])
        achieved = float(cumulative.max())
        metrics[f"bolt_{b}_rotation_deg"] = float(np.degrees(achieved))
        reached = np.nonzero(cumulative >= tol.bolt_rotation)[0]
        if len(reached) == 0:
            return SuccessReport(
                False,
                f"bolt {b}: rotation {np.degrees(achieved):.0f} degrees within the"
                f" {tol.bolt_dist * 1000:.0f} mm tolerance is below"
                f" {np.degrees(tol.bolt_rotation):.0f} degrees",
                metrics,
            )
        completion.append(int(reached[0]))
    after = max(completion)
    hub = np.stack([compose(w, Pose(np.array(HUB_OFFSET))).position for w in wheel])
    hub_dist = np.linalg.norm(wrench - hub, axis=1)
    hub_dist[:after] = np.inf
    metrics["min_hub_dist"] = float(hub_dist.min())
    if hub_dist.min() > tol.hub_dist:
        return SuccessReport(
            False,
            "wrench never reached the wheel center after removing the bolts"
            f" (closest {hub_dist.min() * 100:.1f} cm)",
            metrics,
        )
    return SuccessReport(True, None, metrics)
