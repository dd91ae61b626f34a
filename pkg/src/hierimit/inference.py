"""MAP labeling of demonstrations by dynamic programming.

Hidden state at frame t: x_t = (tool, target, way-point frame k) with
k >= t.  The per-step score is

    log pi_h(tool, target | ...) + log pi_m(k | ...) + log pi_l(observed
    relative-pose delta | ...),

where the low-level term is skipped at the final frame (it needs the next
frame's poses).  The forward pass keeps, per state, the best predecessor
score F and a backpointer R; the backward trace follows R from the best
final state.  States are always kept in lexicographic (tool, target, k)
order and argmax takes the first maximum, so ties break toward the
smallest triple on every platform.

Two scorers drive the same engine: PriorScorer (the analytic
initialization distributions, with either a closed-form straight-line
reach model or a trained low-level head) and LearnedScorer (the policy
stack, with the memory summarized one tuple deep so the chain stays
Markov).  Both also expose a scalar `transition_log_prob` used by tests
and by score recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import pose_delta_many
from .neural import no_grad
from .policies import (
    PolicyConfig,
    PolicyStack,
    estimate_step_scale,
    pair_table,
    prior_high_log_probs,
    prior_mid_log_probs,
    prior_tool_sequence,
    reach_log_density,
    waypoint_norms,
)
from .trajectory import Demonstration, SubTaskLabel


class EmptyDemo(ValueError):
    pass


class NoFeasiblePath(RuntimeError):
    pass


class BrokenChain(RuntimeError):
    pass


@dataclass(frozen=True)
class HiddenState:
    tool: int
    target: int
    waypoint_frame: int


@dataclass
class StepTable:
    tools: np.ndarray
    targets: np.ndarray
    ks: np.ndarray
    F: np.ndarray
    R: np.ndarray  # index into the previous step's arrays; -1 at t=0

    def state(self, i: int) -> HiddenState:
        return HiddenState(int(self.tools[i]), int(self.targets[i]), int(self.ks[i]))


@dataclass
class ViterbiTable:
    steps: list


def candidate_frames(H: int, stride: int) -> np.ndarray:
    """Global way-point candidate grid: every stride-th frame plus the last."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return np.unique(np.concatenate([np.arange(0, H, stride), [H - 1]]))


class _Bound:
    """Shared per-demo precomputation for both scorers."""

    def __init__(self, demo: Demonstration, stride: int, dedup_tol: float):
        self.demo = demo
        self.H = demo.horizon
        self.n = demo.n
        self.rel = demo.rel_stack()  # (H, n, n, 7)
        self.deltas = pose_delta_many(self.rel[1:], self.rel[:-1])  # (H-1, n, n, 7)
        self.k_grid = candidate_frames(self.H, stride)
        # way-point candidates are distinct points, not frames: per pair,
        # count earlier grid frames whose pose matches within dedup_tol,
        # so a frame can be dropped when a duplicate is already in window
        G = len(self.k_grid)
        w = self.rel[self.k_grid]  # (G, n, n, 7)
        diff = pose_delta_many(w[:, None], w[None, :])  # (G, G, n, n, 7)
        dist = np.sqrt(np.sum(diff * diff, axis=-1))    # (G, G, n, n)
        match = dist <= dedup_tol
        tri = np.tril(np.ones((G, G), dtype=bool), k=-1)  # j strictly before k
        self._match_cum = np.cumsum(match & tri[:, :, None, None], axis=1)  # (G, G, n, n)

    def wp_frames(self, t: int) -> np.ndarray:
        return self.k_grid[self.k_grid >= t]

    def keep_mask(self, t: int, pairs: np.ndarray) -> np.ndarray:
        """(P, K) mask: keep candidate k when no duplicate exists in [t, k)."""
        sel = np.nonzero(self.k_grid >= t)[0]
        first = int(sel[0])
        tools, targs = pairs[:, 0], pairs[:, 1]
        total = self._match_cum[sel, -1][:, tools, targs]  # matches before k
        if first > 0:
            before = self._match_cum[sel, first - 1][:, tools, targs]
        else:
            before = np.zeros_like(total)
        return ((total - before) == 0).T  # (P, K)


class BoundPriorScorer(_Bound):
    def __init__(self, demo, cfg: PolicyConfig, low, stride: int):
        super().__init__(demo, stride, cfg.dedup_tol)
        self.cfg = cfg
        self.low = low  # None for the closed-form reach model, or a PolicyStack
        self.reach_step = cfg.reach_step if cfg.reach_step > 0 else estimate_step_scale([demo])
        self.tool_seq = prior_tool_sequence(demo, cfg.pos_scale)
        self.norms = waypoint_norms(self.rel, cfg.pos_scale)
        # log pi_h(target | previous target) lookup, row = previous target
        table = np.full((self.n, self.n), -np.inf)
        for prev in range(1, self.n):
            table[prev] = prior_high_log_probs(prev, self.n, cfg.gamma)
        self.high_table = table
        self.start_high = prior_high_log_probs(None, self.n, cfg.gamma)
        self._mid_cache: dict = {}

    def pairs(self, t: int) -> np.ndarray:
        tool = int(self.tool_seq[t])
        return np.array([(tool, targ) for targ in range(1, self.n) if targ != tool])

    def _mid_tables(self, t: int):
        """Per-pair way-point log-probabilities over the deduplicated
        candidates (-inf at dropped duplicates) plus each pair's
        log-partition mass.

        The combined prior over (target, way-point) is normalized jointly;
        that factors into this per-pair distribution times the partition
        mass folded into the target side, which is what makes targets
        whose candidates approach the identity pose preferred.
        """
        if t in self._mid_cache:
            return self._mid_cache[t]
        pairs = self.pairs(t)
        K = self.wp_frames(t)
        keep = self.keep_mask(t, pairs)
        mid = np.full((len(pairs), len(K)), -np.inf)
        logz = np.empty(len(pairs))
        for p, (tool, targ) in enumerate(pairs):
            kept = np.nonzero(keep[p])[0]
            ks = K[kept]
            future = ks > t
            n_future = max(int(future.sum()), 1)
            with np.errstate(divide="ignore"):
                log_cat = np.where(
                    future, np.log((1.0 - self.cfg.beta) / n_future), np.log(self.cfg.beta)
                )
            logits = -self.cfg.alpha * self.norms[ks, tool, targ] + log_cat
            m = logits.max()
            logz[p] = m + np.log(np.exp(logits - m).sum())
            mid[p, kept] = logits - logz[p]
        out = (mid, logz)
        self._mid_cache[t] = out
        return out

    def high_scores(self, t: int, prev) -> np.ndarray:
        """Target persistence folded with the way-point partition mass,
        normalized over this step's admissible pairs.
        """
        targs = self.pairs(t)[:, 1]
        if prev is None:
            rows = self.start_high[targs][None, :]
        else:
            rows = self.high_table[np.asarray(prev.targets)[:, None], targs[None, :]]
        rows = rows + self._mid_tables(t)[1][None, :]
        m = rows.max(axis=1, keepdims=True)
        return rows - (m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True)))

    def mid_scores(self, t: int, prev) -> np.ndarray:
        return self._mid_tables(t)[0][None]

    def low_scores(self, t: int) -> np.ndarray:
        pairs = self.pairs(t)
        K = self.wp_frames(t)
        if t >= self.H - 1:
            return np.zeros((len(pairs), len(K)))
        tools, targs = pairs[:, 0], pairs[:, 1]
        rel_t = self.rel[t, tools, targs]           # (P, 7)
        wps = self.rel[K[:, None], tools[None, :], targs[None, :]]  # (K, P, 7)
        wps = np.transpose(wps, (1, 0, 2))          # (P, K, 7)
        obs = self.deltas[t, tools, targs][:, None, :]
        if self.low is None:
            return reach_log_density(obs, rel_t[:, None, :], wps,
                                     self.reach_step, self.cfg.reach_sigma)
        P, Kn = len(pairs), len(K)
        with no_grad():
            logp = self.low.low_logpdf(
                np.broadcast_to(obs, (P, Kn, 7)).reshape(-1, 7),
                np.broadcast_to(rel_t[:, None, :], (P, Kn, 7)).reshape(-1, 7),
                wps.reshape(-1, 7),
                np.repeat(tools, Kn),
                np.repeat(targs, Kn),
            )
        return logp.data.reshape(P, Kn)

    def transition_log_prob(self, t: int, prev, state: HiddenState) -> float:
        """Scalar per-step score; -inf when the state is inadmissible."""
        if state.tool != int(self.tool_seq[t]) or not (t <= state.waypoint_frame < self.H):
            return -np.inf
        pairs = self.pairs(t)
        where_pair = np.nonzero((pairs[:, 0] == state.tool) & (pairs[:, 1] == state.target))[0]
        if len(where_pair) == 0:
            return -np.inf
        p = int(where_pair[0])
        mid_table, logz = self._mid_tables(t)
        row = (
            self.start_high[pairs[:, 1]]
            if prev is None
            else self.high_table[prev.target, pairs[:, 1]]
        )
        row = row + logz
        m = row.max()
        high = row[p] - (m + np.log(np.exp(row - m).sum()))
        K = self.wp_frames(t)
        where = np.nonzero(K == state.waypoint_frame)[0]
        if len(where) == 0:
            return -np.inf
        mid = mid_table[p, int(where[0])]
        if not np.isfinite(mid):
            return -np.inf
        low = 0.0
        if t < self.H - 1:
            rel_t = self.rel[t, state.tool, state.target]
            wp = self.rel[state.waypoint_frame, state.tool, state.target]
            obs = self.deltas[t, state.tool, state.target]
            if self.low is None:
                low = float(reach_log_density(obs, rel_t, wp,
                                              self.reach_step, self.cfg.reach_sigma))
            else:
                with no_grad():
                    low = float(
                        self.low.low_logpdf(obs[None], rel_t[None], wp[None],
                                            [state.tool], [state.target]).data[0]
                    )
        return float(high + mid + low)


class BoundLearnedScorer(_Bound):
    """Learned policies as scorers.

    With constrain_tool (the default), the per-frame tool stays pinned to
    the motion-derived assignment, exactly as in the prior phase; the DP
    then searches targets and way-points under the learned scores.  A
    free tool would let the degenerate (end-effector, carried-object)
    pair win every carry segment: that pair's relative pose is constant
    while attached, so a stay-put way-point gets maximal action
    likelihood.
    """

    def __init__(self, demo, stack: PolicyStack, stride: int, constrain_tool: bool = True):
        super().__init__(demo, stride, stack.cfg.dedup_tol)
        if stack.n != self.n:
            raise ValueError(f"stack built for n={stack.n}, demo has n={self.n}")
        self.stack = stack
        self.cfg = stack.cfg
        self.pair_list = np.array(pair_table(self.n))
        self.tool_seq = (
            prior_tool_sequence(demo, stack.cfg.pos_scale) if constrain_tool else None
        )
        ee = demo.ee_stack()
        self.z = np.concatenate([ee, self.rel.reshape(self.H, -1)], axis=1)

    def pairs(self, t: int) -> np.ndarray:
        if self.tool_seq is None:
            return self.pair_list
        tool = int(self.tool_seq[t])
        return np.array([(tool, targ) for targ in range(1, self.n) if targ != tool])

    def _prev_context(self, t: int, prev):
        """Memory output and progress vector for each previous state."""
        if prev is None:
            return np.zeros((1, self.cfg.lstm_width)), np.zeros((1, 7))
        w_prev = self.rel[np.asarray(prev.ks), np.asarray(prev.tools), np.asarray(prev.targets)]
        with no_grad():
            mem = self.stack.memory_one_step(prev.tools, prev.targets, w_prev).data
        g = pose_delta_many(self.rel[t, prev.tools, prev.targets], w_prev)
        return mem, g

    def high_scores(self, t: int, prev) -> np.ndarray:
        mem, g = self._prev_context(t, prev)
        S = mem.shape[0]
        pairs = self.pairs(t)
        z = np.broadcast_to(self.z[t], (S, self.z.shape[1]))
        with no_grad():
            tool_logp, targ_logp = self.stack.high_forward(z, mem, g)
        tools, targs = pairs[:, 0], pairs[:, 1]
        rows = tool_logp.data[:, tools] + targ_logp.data[:, targs]
        # renormalize the factorized product over the admissible pair support
        m = rows.max(axis=1, keepdims=True)
        return rows - (m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True)))

    def mid_scores(self, t: int, prev) -> np.ndarray:
        mem, g = self._prev_context(t, prev)
        S = mem.shape[0]
        pairs = self.pairs(t)
        P = len(pairs)
        K = self.wp_frames(t)
        tools, targs = pairs[:, 0], pairs[:, 1]
        rel_t = self.rel[t, tools, targs]  # (P, 7)
        with no_grad():
            pred = self.stack.mid_forward(
                np.repeat(mem, P, axis=0),
                np.repeat(g, P, axis=0),
                np.tile(rel_t, (S, 1)),
                np.tile(tools, S),
                np.tile(targs, S),
            ).data.reshape(S, P, 7)
        wps = np.transpose(self.rel[K[:, None], tools[None, :], targs[None, :]], (1, 0, 2))
        diff = pose_delta_many(pred[:, :, None, :], wps[None, :, :, :])
        logits = -np.sum(diff * diff, axis=-1) / (2.0 * self.cfg.mid_sigma**2)
        keep = self.keep_mask(t, pairs)  # (P, K)
        logits = np.where(keep[None], logits, -np.inf)
        m = logits.max(axis=-1, keepdims=True)
        return logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))

    def low_scores(self, t: int) -> np.ndarray:
        pairs = self.pairs(t)
        P = len(pairs)
        K = self.wp_frames(t)
        if t >= self.H - 1:
            return np.zeros((P, len(K)))
        tools, targs = pairs[:, 0], pairs[:, 1]
        rel_t = self.rel[t, tools, targs]
        wps = np.transpose(self.rel[K[:, None], tools[None, :], targs[None, :]], (1, 0, 2))
        obs = self.deltas[t, tools, targs][:, None, :]
        Kn = len(K)
        with no_grad():
            logp = self.stack.low_logpdf(
                np.broadcast_to(obs, (P, Kn, 7)).reshape(-1, 7),
                np.broadcast_to(rel_t[:, None, :], (P, Kn, 7)).reshape(-1, 7),
                wps.reshape(-1, 7),
                np.repeat(tools, Kn),
                np.repeat(targs, Kn),
            )
        return logp.data.reshape(P, Kn)

    def transition_log_prob(self, t: int, prev, state: HiddenState) -> float:
        if (
            state.target == 0
            or state.target == state.tool
            or not (t <= state.waypoint_frame < self.H)
        ):
            return -np.inf
        pairs = self.pairs(t)
        tools, targs = pairs[:, 0], pairs[:, 1]
        where_pair = np.nonzero((tools == state.tool) & (targs == state.target))[0]
        if len(where_pair) == 0:
            return -np.inf
        prev_obj = None
        if prev is not None:
            prev_obj = _SingleState(prev)
        mem, g = self._prev_context(t, prev_obj)
        z = self.z[t][None]
        with no_grad():
            tool_logp, targ_logp = self.stack.high_forward(z, mem, g)
        row = tool_logp.data[0, tools] + targ_logp.data[0, targs]
        m = row.max()
        logz = m + np.log(np.exp(row - m).sum())
        high = float(row[int(where_pair[0])] - logz)
        K = self.wp_frames(t)
        rel_t = self.rel[t, state.tool, state.target]
        with no_grad():
            pred = self.stack.mid_forward(mem, g, rel_t[None],
                                          [state.tool], [state.target]).data[0]
        wps = self.rel[K, state.tool, state.target]
        diff = pose_delta_many(pred[None], wps)
        logits = -np.sum(diff * diff, axis=-1) / (2.0 * self.cfg.mid_sigma**2)
        keep = self.keep_mask(t, np.array([[state.tool, state.target]]))[0]
        logits = np.where(keep, logits, -np.inf)
        m = logits.max()
        logz = m + np.log(np.exp(logits - m).sum())
        where = np.nonzero(K == state.waypoint_frame)[0]
        if len(where) == 0 or not keep[int(where[0])]:
            return -np.inf
        mid = float(logits[int(where[0])] - logz)
        low = 0.0
        if t < self.H - 1:
            obs = self.deltas[t, state.tool, state.target]
            wp = self.rel[state.waypoint_frame, state.tool, state.target]
            with no_grad():
                low = float(
                    self.stack.low_logpdf(obs[None], rel_t[None], wp[None],
                                          [state.tool], [state.target]).data[0]
                )
        return high + mid + low


class _SingleState:
    """Adapter presenting one HiddenState as a previous-state batch."""

    def __init__(self, s: HiddenState):
        self.tools = np.array([s.tool])
        self.targets = np.array([s.target])
        self.ks = np.array([s.waypoint_frame])


class PriorScorer:
    """Analytic initialization scorers; `low` may be a trained PolicyStack."""

    def __init__(self, cfg: PolicyConfig | None = None, low: PolicyStack | None = None,
                 stride: int = 1):
        self.cfg = cfg or PolicyConfig()
        self.low = low
        self.stride = stride

    def bind(self, demo: Demonstration) -> BoundPriorScorer:
        return BoundPriorScorer(demo, self.cfg, self.low, self.stride)


class LearnedScorer:
    """The trained policy stack as Viterbi scorers."""

    def __init__(self, stack: PolicyStack, stride: int = 1, constrain_tool: bool = True):
        self.stack = stack
        self.stride = stride
        self.constrain_tool = constrain_tool

    def bind(self, demo: Demonstration) -> BoundLearnedScorer:
        return BoundLearnedScorer(demo, self.stack, self.stride, self.constrain_tool)


class _PrevStates:
    def __init__(self, tools, targets, ks):
        self.tools = tools
        self.targets = targets
        self.ks = ks


def forward_pass(demo: Demonstration, scorer, mode: str = "exact",
                 beam_width: int = 512) -> ViterbiTable:
    """Fill the per-step DP tables; `mode` is "exact" or "beam"."""
    if demo.horizon < 1:
        raise EmptyDemo("demonstration has no frames")
    if mode == "beam" and beam_width < 1:
        raise ValueError("beam width must be >= 1")
    bound = scorer.bind(demo)
    steps = []
    prev = None
    F_prev = None
    for t in range(bound.H):
        pairs = bound.pairs(t)
        K = bound.wp_frames(t)
        P, Kn = len(pairs), len(K)
        low = bound.low_scores(t)
        high = bound.high_scores(t, prev)
        mid = bound.mid_scores(t, prev)
        if prev is None:
            F = (high[:, :, None] + mid + low[None]).reshape(P, Kn)
            R = np.full((P, Kn), -1, dtype=np.int64)
        else:
            M = F_prev[:, None, None] + high[:, :, None] + mid
            R = np.argmax(M, axis=0)
            F = np.take_along_axis(M, R[None], axis=0)[0] + low
        tools = np.repeat(pairs[:, 0], Kn)
        targets = np.repeat(pairs[:, 1], Kn)
        ks = np.tile(K, P)
        F_flat = F.reshape(-1)
        R_flat = R.reshape(-1)

        keep = np.nonzero(np.isfinite(F_flat))[0]
        if len(keep) == 0:
            raise NoFeasiblePath(f"all states scored -inf at frame {t}")
        if mode == "beam" and len(keep) > beam_width:
            order = np.argsort(-F_flat[keep], kind="stable")[:beam_width]
            keep = np.sort(keep[order])
        step = StepTable(tools[keep], targets[keep], ks[keep], F_flat[keep], R_flat[keep])
        steps.append(step)
        prev = _PrevStates(step.tools, step.targets, step.ks)
        F_prev = step.F
    return ViterbiTable(steps)


def backward_trace(table: ViterbiTable) -> list:
    """Most likely state chain, following backpointers from the best end state."""
    steps = table.steps
    chain: list[HiddenState] = []
    idx = int(np.argmax(steps[-1].F))
    for t in range(len(steps) - 1, -1, -1):
        step = steps[t]
        chain.append(step.state(idx))
        nxt = int(step.R[idx])
        if t > 0:
            if nxt < 0 or nxt >= len(steps[t - 1].F):
                raise BrokenChain(f"missing predecessor at frame {t}")
            idx = nxt
    chain.reverse()
    return chain


def viterbi_label(demo: Demonstration, scorer, mode: str = "exact",
                  beam_width: int = 512):
    """MAP label sequence and its log-score."""
    table = forward_pass(demo, scorer, mode=mode, beam_width=beam_width)
    chain = backward_trace(table)
    labels = [SubTaskLabel(s.tool, s.target, s.waypoint_frame) for s in chain]
    log_score = float(np.max(table.steps[-1].F))
    return labels, log_score


def score_sequence(demo: Demonstration, scorer, labels) -> float:
    """Recompute a label sequence's total log-score through the scalar path."""
    bound = scorer.bind(demo)
    total = 0.0
    prev = None
    for t, lab in enumerate(labels):
        state = HiddenState(lab.tool, lab.target, lab.waypoint_frame)
        total += bound.transition_log_prob(t, prev, state)
        prev = state
    return total
