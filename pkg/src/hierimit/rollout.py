"""Closed-loop execution of a trained stack in the kinematic world.

Every step the high level re-picks its (tool, target) pair by argmax, the
intermediate level emits a way-point, and the low level's mean action
(clipped to the step bound) moves the end-effector; there is no explicit
sub-task termination.  The progress vector always uses the previous
frame's choice; the memory LSTM consumes a chosen tuple only when it
differs from the last one consumed (pair switch, or the way-point moving
more than waypoint_change_tol).

Episodes end on task success, a detected failure (leaving the workspace)
or the step cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import IDENTITY_VEC7, Pose, pose_delta, pose_delta_many
from .neural import no_grad
from .policies import PolicyStack
from .simworld import KinematicWorld, SimConfig, TaskSpec, check_success, sample_layout
from .simworld.world import WorldState, clip_delta
from .trajectory import Demonstration, Observation, build_rel_matrix

WAYPOINT_CHANGE_TOL = 0.005


@dataclass
class EpisodeRecord:
    success: bool
    steps: int
    reason: str


@dataclass
class EvalReport:
    family: str
    episodes_per_seed: int
    per_seed: dict = field(default_factory=dict)  # seed -> list[EpisodeRecord]

    def seed_rate(self, seed: int) -> float:
        recs = self.per_seed[seed]
        return sum(r.success for r in recs) / len(recs)

    def seed_mean_len(self, seed: int) -> float:
        recs = self.per_seed[seed]
        return float(np.mean([r.steps for r in recs]))

    @property
    def mean_success(self) -> float:
        return float(np.mean([self.seed_rate(s) for s in sorted(self.per_seed)]))

    @property
    def std_success(self) -> float:
        return float(np.std([self.seed_rate(s) for s in sorted(self.per_seed)]))

    @property
    def mean_length(self) -> float:
        return float(np.mean([self.seed_mean_len(s) for s in sorted(self.per_seed)]))

    def as_text(self) -> str:
        lines = [f"family={self.family} episodes_per_seed={self.episodes_per_seed}"]
        for seed in sorted(self.per_seed):
            recs = self.per_seed[seed]
            lines.append(
                f"seed={seed} episodes={len(recs)} successes={sum(r.success for r in recs)}"
                f" success_rate={self.seed_rate(seed):.4f} mean_len={self.seed_mean_len(seed):.2f}"
            )
        lines.append(
            f"aggregate mean_success={self.mean_success:.4f} std_success={self.std_success:.4f}"
            f" mean_len={self.mean_length:.2f}"
        )
        for seed in sorted(self.per_seed):
            for ep, rec in enumerate(self.per_seed[seed]):
                outcome = "success" if rec.success else "failure"
                lines.append(
                    f"episode seed={seed} ep={ep} result={outcome} len={rec.steps}"
                    f" reason={rec.reason}"
                )
        return "\n".join(lines) + "\n"


def observe(state: WorldState, labels: tuple, timestamp: float) -> Observation:
    return Observation(
        end_effector=state.ee,
        labels=labels,
        rel=build_rel_matrix(state.object_world_poses),
        timestamp=timestamp,
    )


def run_episode(
    stack: PolicyStack,
    spec: TaskSpec,
    sim_cfg: SimConfig,
    initial_state: WorldState,
    step_cap: int = 600,
    check_every: int = 10,
) -> tuple:
    """Deterministic closed-loop episode; returns (EpisodeRecord, Demonstration)."""
    world = KinematicWorld(spec, sim_cfg)
    state = initial_state
    labels = spec.labels
    frames = [observe(state, labels, 0.0)]
    interval = 1 if spec.family.startswith("stacking") else max(1, check_every)

    mem_state = stack.memory.zero_state(batch=1)
    mem_out = np.zeros((1, stack.cfg.lstm_width))
    last_consumed = None  # (tool, target, w) last fed to the LSTM
    prev_choice = None    # previous frame's (tool, target, w) for the progress vector

    reason = "step_cap"
    success = False
    steps_taken = 0
    for t in range(step_cap):
        obs = frames[-1]
        rel = obs.rel
        z = np.concatenate([obs.end_effector.vec7, rel.reshape(-1)])[None]
        if prev_choice is None:
            g = np.zeros((1, 7))
        else:
            p_tool, p_targ, p_w = prev_choice
            g = pose_delta_many(rel[p_tool, p_targ][None], p_w[None])
        with no_grad():
            tool_logp, targ_logp = stack.high_forward(z, mem_out, g)
            tool = int(np.argmax(tool_logp.data[0]))
            targ = int(np.argmax(targ_logp.data[0]))
            w = stack.mid_forward(
                mem_out, g, rel[tool, targ][None], [tool], [targ]
            ).data[0]
            mean, _ = stack.low_forward(rel[tool, targ][None], w[None], [tool], [targ])
        action = clip_delta(mean.data[0], sim_cfg.max_step)

        consumed_changed = (
            last_consumed is None
            or tool != last_consumed[0]
            or targ != last_consumed[1]
            or float(np.max(np.abs(pose_delta(w, last_consumed[2])))) > WAYPOINT_CHANGE_TOL
        )
        if consumed_changed:
            with no_grad():
                x = stack.tuple_input(np.array([tool]), np.array([targ]), w[None])
                mem_state, h = stack.memory(mem_state, x)
                mem_out = h.data
            last_consumed = (tool, targ, w)
        prev_choice = (tool, targ, w)

        state = world.step(state, action)
        steps_taken = t + 1
        frames.append(observe(state, labels, 0.1 * steps_taken))

        pos = state.ee.position
        if (
            abs(pos[0]) > 1.5 * sim_cfg.workspace
            or abs(pos[1]) > 1.5 * sim_cfg.workspace
            or pos[2] > 1.0
            or pos[2] < -0.2
        ):
            reason = "out_of_bounds"
            break
        if steps_taken % interval == 0 or steps_taken == step_cap:
            report = check_success(spec, Demonstration(tuple(frames), spec.family))
            if report.success:
                success = True
                reason = "success"
                break

    if not success and reason == "step_cap":
        report = check_success(spec, Demonstration(tuple(frames), spec.family))
        if report.success:
            success = True
            reason = "success"
        else:
            reason = f"step_cap: {report.failure}"

    demo = Demonstration(tuple(frames), spec.family)
    return EpisodeRecord(success, steps_taken, reason), demo


def evaluate(
    stack: PolicyStack,
    spec: TaskSpec,
    sim_cfg: SimConfig,
    episodes: int,
    seeds,
    step_cap: int = 600,
    check_every: int = 10,
) -> EvalReport:
    """Roll `episodes` random-layout episodes per seed, deterministically."""
    report = EvalReport(family=spec.family, episodes_per_seed=episodes)
    for seed in seeds:
        rng = np.random.default_rng(int(seed))
        recs = []
        for _ in range(episodes):
            layout = sample_layout(spec, rng, sim_cfg)
            rec, _ = run_episode(stack, spec, sim_cfg, layout, step_cap, check_every)
            recs.append(rec)
        report.per_seed[int(seed)] = recs
    return report
