"""Supervised training on (pseudo-)labels and the outer labeling loop.

The loss is a sum of six unweighted terms: cross-entropy on the tool and
on the target, mean-squared error on the way-point, the action
log-likelihood under the low-level Gaussian, a memory-consistency penalty
that fires only while the (tool, target, way-point) tuple is unchanged,
and a retrieval term that reconstructs the previous step's tuple from the
memory output.

Batches are whole demonstrations packed to roughly the configured frame
count, so the LSTM can always be unrolled from the episode start over the
per-frame label tuples (teacher forcing).  Supervision source is just an
input: ground-truth and Viterbi pseudo-labels flow through identical
code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import pose_delta_many
from .inference import LearnedScorer, PriorScorer, viterbi_label
from .neural import (
    Tensor,
    concat,
    gaussian_logpdf,
    l2_rows,
    reshape,
    softmax_ce,
    square,
    tsum,
)
from .policies import PolicyConfig, PolicyStack, init_low_level
from .trajectory import Demonstration, SubTaskLabel

WAYPOINT_TUPLE_TOL = 1e-6


class MissingHistory(ValueError):
    """A labeled frame arrived without its episode prefix."""


class EmptyDemos(ValueError):
    pass


@dataclass
class TrainSettings:
    iterations: int = 20000
    batch_frames: int = 2048
    learning_rate: float = 1e-4
    log_every: int = 50


@dataclass
class EmSettings:
    max_outer: int = 5
    epsilon: float = 0.01
    mode: str = "exact"
    beam_width: int = 512
    stride: int = 1
    init_iterations: int = 2000
    init_batch: int = 512
    init_lr: float = 2e-3


@dataclass
class LossReport:
    tool: float
    target: float
    waypoint: float
    action: float
    memory: float
    retrieval: float

    @property
    def total(self) -> float:
        return self.tool + self.target + self.waypoint + self.action + self.memory + self.retrieval

    def as_line(self, iteration: int, wall: float) -> str:
        return (
            f"iter={iteration} L_tool={self.tool:.6f} L_target={self.target:.6f}"
            f" L_w={self.waypoint:.6f} L_action={self.action:.6f} L_mem={self.memory:.6f}"
            f" L_ret={self.retrieval:.6f} L={self.total:.6f} wall={wall:.3f}"
        )


@dataclass
class LabeledBatch:
    """Padded per-demo arrays ready for the unrolled loss."""

    tools: np.ndarray       # (B, T) int
    targets: np.ndarray     # (B, T) int
    wvec: np.ndarray        # (B, T, 7) materialized way-points, target frame
    z: np.ndarray           # (B, T, zw)
    rel_pair: np.ndarray    # (B, T, 7) current tool-in-target pose
    g: np.ndarray           # (B, T, 7) progress vector
    action: np.ndarray      # (B, T, 7) next end-effector delta
    valid: np.ndarray       # (B, T) frame exists
    act_valid: np.ndarray   # (B, T) frame and its successor exist
    prev_valid: np.ndarray  # (B, T) frame exists and t >= 1
    same_tuple: np.ndarray  # (B, T) tuple unchanged from the previous frame


def materialize_waypoints(demo: Demonstration, labels) -> np.ndarray:
    rel = demo.rel_stack()
    out = np.empty((len(labels), 7))
    for t, lab in enumerate(labels):
        out[t] = rel[lab.waypoint_frame, lab.tool, lab.target]
    return out


def assemble_batch(pairs, z_width: int) -> LabeledBatch:
    """pairs: list of (Demonstration, label sequence) covering whole episodes."""
    B = len(pairs)
    T = max(d.horizon for d, _ in pairs)
    shp = (B, T)
    batch = LabeledBatch(
        tools=np.zeros(shp, dtype=np.intp),
        targets=np.ones(shp, dtype=np.intp),
        wvec=np.zeros(shp + (7,)),
        z=np.zeros(shp + (z_width,)),
        rel_pair=np.zeros(shp + (7,)),
        g=np.zeros(shp + (7,)),
        action=np.zeros(shp + (7,)),
        valid=np.zeros(shp, dtype=bool),
        act_valid=np.zeros(shp, dtype=bool),
        prev_valid=np.zeros(shp, dtype=bool),
        same_tuple=np.zeros(shp, dtype=bool),
    )
    for b, (demo, labels) in enumerate(pairs):
        H = demo.horizon
        if labels is None or len(labels) != H:
            raise MissingHistory(
                f"demo '{demo.task_id}': need one label per frame from episode start"
            )
        rel = demo.rel_stack()
        ee = demo.ee_stack()
        tools = np.array([l.tool for l in labels])
        targets = np.array([l.target for l in labels])
        wvec = materialize_waypoints(demo, labels)
        batch.tools[b, :H] = tools
        batch.targets[b, :H] = targets
        batch.wvec[b, :H] = wvec
        batch.z[b, :H] = np.concatenate([ee, rel.reshape(H, -1)], axis=1)
        batch.rel_pair[b, :H] = rel[np.arange(H), tools, targets]
        batch.g[b, 1:H] = pose_delta_many(
            rel[np.arange(1, H), tools[:-1], targets[:-1]], wvec[:-1]
        )
        batch.action[b, : H - 1] = pose_delta_many(ee[1:], ee[:-1])
        batch.valid[b, :H] = True
        batch.act_valid[b, : H - 1] = True
        batch.prev_valid[b, 1:H] = True
        same_pair = (tools[1:] == tools[:-1]) & (targets[1:] == targets[:-1])
        same_w = np.max(np.abs(pose_delta_many(wvec[1:], wvec[:-1])), axis=-1) <= WAYPOINT_TUPLE_TOL
        batch.same_tuple[b, 1:H] = same_pair & same_w
    return batch


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    count = max(int(mask.sum()), 1)
    return tsum(values * mask.astype(np.float64)) * (1.0 / count)


def compute_losses(
    stack: PolicyStack,
    batch: LabeledBatch,
    backward: bool = True,
    memory_mode: str = "unroll",
) -> LossReport:
    """All six loss terms over one packed batch; accumulates gradients.

    memory_mode picks what the policy heads see as history: "unroll" is
    the LSTM run over the per-frame tuple sequence from episode start
    (what closed-loop execution resembles), "summary" is the one-tuple
    summary that MAP inference queries.  The memory-consistency and
    retrieval terms always train on the full unroll.  Alternating modes
    across iterations keeps the heads calibrated for both consumers.
    """
    B, T = batch.tools.shape

    # memory unroll over per-frame tuples: mems[:, t] has consumed tuples < t
    tuple_in = stack.tuple_input(batch.tools, batch.targets, batch.wvec)
    state = stack.memory.zero_state(batch=B)
    mem_steps = [Tensor(np.zeros((B, stack.cfg.lstm_width)))]
    for t in range(T - 1):
        state, h = stack.memory(state, tuple_in[:, t])
        mem_steps.append(h)
    mems = concat([reshape(h, (B, 1, stack.cfg.lstm_width)) for h in mem_steps], axis=1)

    if memory_mode == "summary":
        # one-step summaries of the previous frame's tuple, zero at t=0
        prev_tools = np.roll(batch.tools, 1, axis=1)
        prev_targets = np.roll(batch.targets, 1, axis=1)
        prev_w = np.roll(batch.wvec, 1, axis=1)
        flat_in = stack.tuple_input(
            prev_tools.reshape(-1), prev_targets.reshape(-1), prev_w.reshape(-1, 7)
        )
        zero = stack.memory.zero_state(batch=B * T)
        _, h1 = stack.memory(zero, flat_in)
        head_mems = reshape(h1, (B, T, stack.cfg.lstm_width)) * batch.prev_valid[..., None]
    elif memory_mode == "unroll":
        head_mems = mems
    else:
        raise ValueError(f"unknown memory_mode '{memory_mode}'")

    tool_logp, targ_logp = stack.high_forward(batch.z, head_mems, batch.g)
    l_tool = _masked_mean(softmax_ce_from_logp(tool_logp, batch.tools), batch.valid)
    l_target = _masked_mean(softmax_ce_from_logp(targ_logp, batch.targets), batch.valid)

    w_pred = stack.mid_forward(head_mems, batch.g, batch.rel_pair, batch.tools, batch.targets)
    w_aligned = align_to(batch.wvec, w_pred.data)
    l_w = _masked_mean(tsum(square(w_pred - w_aligned), axis=-1) * (1.0 / 7.0), batch.valid)

    mean, log_std = stack.low_forward(batch.rel_pair, batch.wvec, batch.tools, batch.targets)
    act_logp = gaussian_logpdf(batch.action, mean, log_std)
    l_action = _masked_mean(-act_logp, batch.act_valid)

    mem_diff = l2_rows(mems[:, 1:] - mems[:, :-1])
    mem_mask = batch.same_tuple[:, 1:] & batch.prev_valid[:, 1:]
    l_mem = _masked_mean(mem_diff, mem_mask)

    ret_tool, ret_target, ret_w = stack.retrieval_forward(mems)
    prev_tools = np.roll(batch.tools, 1, axis=1)
    prev_targets = np.roll(batch.targets, 1, axis=1)
    prev_w = np.roll(batch.wvec, 1, axis=1)
    ce_tool = softmax_ce(ret_tool, prev_tools)
    ce_target = softmax_ce(ret_target, prev_targets)
    mse_w = tsum(square(ret_w - align_to(prev_w, ret_w.data)), axis=-1) * (1.0 / 7.0)
    l_ret = _masked_mean(ce_tool + ce_target + mse_w, batch.prev_valid)

    total = l_tool + l_target + l_w + l_action + l_mem + l_ret
    if backward:
        total.backward()
    return LossReport(
        tool=l_tool.item(),
        target=l_target.item(),
        waypoint=l_w.item(),
        action=l_action.item(),
        memory=l_mem.item(),
        retrieval=l_ret.item(),
    )


def softmax_ce_from_logp(logp: Tensor, idx: np.ndarray) -> Tensor:
    """Cross-entropy from already-normalized log-probabilities."""
    rows = tuple(np.indices(idx.shape))
    return -logp[rows + (np.asarray(idx, dtype=np.intp),)]


def align_to(target: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Flip target quaternions into the hemisphere of the reference (constant)."""
    out = np.array(target, copy=True)
    dot = np.sum(out[..., 3:] * reference[..., 3:], axis=-1)
    out[..., 3:] = np.where((dot < 0)[..., None], -out[..., 3:], out[..., 3:])
    return out


def train_policies(
    stack: PolicyStack,
    labeled,
    settings: TrainSettings,
    seed: int = 0,
    log_lines: list | None = None,
):
    """Sampled-batch Adam on the six-term loss; returns per-iteration reports.

    labeled: list of (Demonstration, label sequence).
    """
    if not labeled:
        raise ValueError("train_policies needs at least one labeled demonstration")
    rng = np.random.default_rng(seed)
    reports = []
    t_start = time.time()
    for it in range(settings.iterations):
        order = rng.permutation(len(labeled))
        chosen = []
        frames = 0
        for idx in order:
            chosen.append(labeled[int(idx)])
            frames += labeled[int(idx)][0].horizon
            if frames >= settings.batch_frames:
                break
        batch = assemble_batch(chosen, stack.z_width)
        stack.store.zero_grad()
        report = compute_losses(
            stack, batch, memory_mode="unroll" if it % 2 == 0 else "summary"
        )
        stack.store.adam_step(settings.learning_rate)
        reports.append(report)
        if log_lines is not None and (it % settings.log_every == 0 or it == settings.iterations - 1):
            log_lines.append(report.as_line(it, time.time() - t_start))
    return reports


def label_change_fraction(old, new) -> float:
    """Fraction of frames whose (tool, target, way-point frame) changed."""
    total = 0
    changed = 0
    for a, b in zip(old, new):
        for la, lb in zip(a, b):
            total += 1
            if la.astuple() != lb.astuple():
                changed += 1
    return changed / max(total, 1)


@dataclass
class EmResult:
    stack: PolicyStack
    labels: list
    change_fractions: list = field(default_factory=list)
    log_scores: list = field(default_factory=list)
    train_reports: list = field(default_factory=list)


def em_loop(
    demos,
    policy_cfg: PolicyConfig,
    train_settings: TrainSettings,
    em_settings: EmSettings,
    seed: int = 0,
    stack: PolicyStack | None = None,
    initial_labels: list | None = None,
    log_lines: list | None = None,
) -> EmResult:
    """Alternate Viterbi relabeling and policy training until labels settle.

    Iteration 0 labels with the analytic priors over a low-level head
    trained on synthetic reaching; later iterations relabel with the
    updated policy stack.  Stops when the fraction of changed frame
    labels drops below epsilon or max_outer passes complete.
    """
    if not demos:
        raise EmptyDemos("em_loop needs demonstrations")
    n = demos[0].n
    if stack is None:
        stack = PolicyStack(n, policy_cfg, seed=seed)
    result = EmResult(stack=stack, labels=initial_labels)

    if initial_labels is None:
        init_low_level(
            stack,
            demos,
            iterations=em_settings.init_iterations,
            batch=em_settings.init_batch,
            lr=em_settings.init_lr,
            seed=seed,
        )
        scorer = PriorScorer(policy_cfg, low=stack, stride=em_settings.stride)
        labels, scores = _relabel(demos, scorer, em_settings)
        result.labels = labels
        result.log_scores.append(scores)
        if log_lines is not None:
            log_lines.append(f"em_iter=0 phase=prior_label mean_score={np.mean(scores):.3f}")
    else:
        if len(initial_labels) != len(demos):
            raise MissingHistory("initial_labels must cover every demonstration")

    for outer in range(1, em_settings.max_outer + 1):
        reports = train_policies(
            stack,
            list(zip(demos, result.labels)),
            train_settings,
            seed=seed + outer,
            log_lines=log_lines,
        )
        result.train_reports.append(reports)
        scorer = LearnedScorer(stack, stride=em_settings.stride)
        new_labels, scores = _relabel(demos, scorer, em_settings)
        frac = label_change_fraction(result.labels, new_labels)
        result.labels = new_labels
        result.change_fractions.append(frac)
        result.log_scores.append(scores)
        if log_lines is not None:
            log_lines.append(
                f"em_iter={outer} phase=relabel change_fraction={frac:.4f}"
                f" mean_score={np.mean(scores):.3f}"
            )
        if frac < em_settings.epsilon:
            break
    return result


def _relabel(demos, scorer, em_settings: EmSettings):
    labels = []
    scores = []
    for demo in demos:
        seq, score = viterbi_label(
            demo, scorer, mode=em_settings.mode, beam_width=em_settings.beam_width
        )
        labels.append(seq)
        scores.append(score)
    return labels, scores


def labels_from_demo(demo: Demonstration):
    """Ground truth when present, else pseudo-labels; None otherwise."""
    if demo.ground_truth is not None:
        return demo.ground_truth
    return demo.pseudo_labels
