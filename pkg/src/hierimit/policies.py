"""The three-level policy stack and its analytic initialization priors.

Learned side: a shared LSTM encodes the history of (tool, target,
way-point) tuples; the high level scores (tool, target) pairs from the
observation features, the memory output and an embedded progress vector;
the intermediate level regresses a way-point 7-vector in the target's
frame; the low level outputs a diagonal Gaussian over end-effector pose
deltas.  Retrieval heads reconstruct the previous tuple from the memory
output.  Tool/target identity enters every head as a learned slot
embedding of width 8.

Prior side: the tool is the object moving most relative to the others
(the end-effector when everything else is mutually still); targets keep
their previous assignment with probability gamma; way-point candidates
are future observed relative poses weighted toward the target by
exp(-alpha * distance-from-identity); reaching behavior is a clipped
straight-line Gaussian, either in closed form or distilled into the
low-level network by init_low_level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import IDENTITY_VEC7, identity_offset, pose_delta_many
from .neural import (
    Dense,
    Embedding,
    LstmCell,
    MLP,
    ParamStore,
    ShapeMismatch,
    Tensor,
    as_tensor,
    concat,
    div,
    gaussian_logpdf,
    log_softmax,
    no_grad,
    sqrt,
    square,
    tsum,
    where_mask,
)
from .simworld.world import clip_delta
from .trajectory import EE_INDEX, Demonstration

STATIONARY_MOTION_EPS = 1e-4


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 64
    lstm_width: int = 32
    embed_width: int = 8
    g_embed_width: int = 64
    init_log_std: float = float(np.log(0.01))
    min_log_std: float = float(np.log(1e-3))
    gamma: float = 0.95
    alpha: float = 100.0
    beta: float = 0.95
    pos_scale: float = 1.0
    mid_sigma: float = 0.02     # way-point scoring scale during inference
    reach_sigma: float = 0.01   # analytic straight-line reach scorer std
    reach_step: float = 0.0     # straight-line step cap; 0 = estimate from data
    dedup_tol: float = 0.01     # candidates closer than this collapse to one
    max_step: float = 0.05


def pair_table(n: int) -> list:
    """Admissible (tool, target) pairs, lexicographically ordered.

    The target is never the end-effector and never the tool itself: the
    tool-in-its-own-frame pose is identically the identity, which would
    make self-pairs degenerate maximizers of every score.
    """
    return [(tool, targ) for tool in range(n) for targ in range(1, n) if targ != tool]


def pair_mask(n: int) -> np.ndarray:
    """(n, n) boolean mask of admissible (tool, target) pairs."""
    mask = np.ones((n, n), dtype=bool)
    mask[:, EE_INDEX] = False
    np.fill_diagonal(mask, False)
    mask[EE_INDEX, EE_INDEX] = False
    return mask


class PolicyStack:
    """Learned policies over a fixed object count n."""

    def __init__(self, n: int, cfg: PolicyConfig | None = None, seed: int = 0):
        if n < 3:
            raise ValueError("need at least 3 objects (end-effector + 2)")
        self.n = n
        self.cfg = cfg or PolicyConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        self.store = ParamStore()
        self.store.meta["n"] = str(n)
        s = self.store

        self.emb = Embedding(s, "emb", n, c.embed_width, rng)
        tuple_width = 2 * c.embed_width + 7
        self.memory = LstmCell(s, "mem", tuple_width, c.lstm_width, rng)
        self.g_enc = Dense(s, "g_enc", 7, c.g_embed_width, rng, activation="relu")

        self.z_width = 7 + n * n * 7
        high_in = self.z_width + c.lstm_width + c.g_embed_width
        self.high_trunk = MLP(s, "high", [high_in, c.hidden, c.hidden], rng,
                              out_activation="relu")
        self.high_tool = Dense(s, "high_tool", c.hidden, n, rng)
        self.high_target = Dense(s, "high_target", c.hidden, n, rng)

        mid_in = c.lstm_width + 7 + 7 + 2 * c.embed_width
        self.mid_net = MLP(s, "mid", [mid_in, c.hidden, c.hidden, 7], rng)

        # the way-point-minus-current difference rides along as an input
        # feature; straight-line reaching is then nearly linear in it
        low_in = 7 + 7 + 7 + 2 * c.embed_width
        self.low_net = MLP(s, "low", [low_in, c.hidden, c.hidden, 7], rng)
        self.low_log_std = s.add("low.log_std", np.full(7, c.init_log_std))

        self.ret_tool = Dense(s, "ret_tool", c.lstm_width, n, rng)
        self.ret_target = Dense(s, "ret_target", c.lstm_width, n, rng)
        self.ret_w = Dense(s, "ret_w", c.lstm_width, 7, rng)

        self.target_mask = np.ones(n, dtype=bool)
        self.target_mask[EE_INDEX] = False

    # -- shared pieces ---------------------------------------------------
    def tuple_input(self, tools, targets, waypoints) -> Tensor:
        """(B,) index arrays + (B, 7) way-points -> LSTM input rows."""
        return concat(
            [self.emb(tools), self.emb(targets), as_tensor(waypoints)], axis=-1
        )

    def memory_one_step(self, tools, targets, waypoints) -> Tensor:
        """One-step history summary used during inference."""
        x = self.tuple_input(np.atleast_1d(tools), np.atleast_1d(targets),
                             np.atleast_2d(waypoints))
        state = self.memory.zero_state(batch=x.data.shape[0])
        _, h = self.memory(state, x)
        return h

    # -- heads -----------------------------------------------------------
    def high_forward(self, z, mem, g):
        """Log-probabilities over tools and over admissible targets.

        z: (B, z_width) observation features (end-effector 7-vector plus
        the flattened relative-pose matrix); mem: (B, lstm); g: (B, 7).
        Pair log-probability is the sum of the two heads' entries.
        """
        z = as_tensor(z)
        if z.data.shape[-1] != self.z_width:
            raise ShapeMismatch(f"z width {z.data.shape[-1]} != {self.z_width}")
        trunk = self.high_trunk(concat([z, as_tensor(mem), self.g_enc(as_tensor(g))], axis=-1))
        tool_logp = log_softmax(self.high_tool(trunk), axis=-1)
        target_logp = log_softmax(
            self.high_target(trunk), axis=-1,
            mask=np.broadcast_to(self.target_mask, trunk.data.shape[:-1] + (self.n,)),
        )
        return tool_logp, target_logp

    def mid_forward(self, mem, g, rel, tools, targets) -> Tensor:
        """Way-point prediction in the target frame; unit, canonical quaternion.

        The head's raw output is an offset from the identity pose, so a
        zeroed final layer predicts the identity relative pose.
        """
        x = concat(
            [as_tensor(mem), as_tensor(g), as_tensor(rel),
             self.emb(np.atleast_1d(tools)), self.emb(np.atleast_1d(targets))],
            axis=-1,
        )
        raw = self.mid_net(x) + IDENTITY_VEC7
        pos = raw[..., :3]
        quat = raw[..., 3:]
        qnorm = sqrt(tsum(square(quat), axis=-1, keepdims=True) + 1e-18)
        quat = div(quat, qnorm)
        sign = np.where(quat.data[..., :1] < 0.0, -1.0, 1.0)  # canonical hemisphere
        return concat([pos, quat * sign], axis=-1)

    def low_forward(self, rel, waypoint, tools, targets):
        """Mean and (shared, floored) log-std of the action delta Gaussian."""
        rel_arr = as_tensor(rel).data
        way_arr = as_tensor(waypoint).data
        x = concat(
            [as_tensor(rel), as_tensor(waypoint), Tensor(pose_delta_many(way_arr, rel_arr)),
             self.emb(np.atleast_1d(tools)), self.emb(np.atleast_1d(targets))],
            axis=-1,
        )
        mean = self.low_net(x)
        floor = self.cfg.min_log_std
        log_std = where_mask(self.low_log_std.data > floor, self.low_log_std,
                             Tensor(np.full(7, floor)))
        return mean, log_std

    def low_logpdf(self, action, rel, waypoint, tools, targets) -> Tensor:
        mean, log_std = self.low_forward(rel, waypoint, tools, targets)
        return gaussian_logpdf(as_tensor(action), mean, log_std)

    def retrieval_forward(self, mem):
        """Heads reconstructing the previous step's tuple from memory."""
        mem = as_tensor(mem)
        return self.ret_tool(mem), self.ret_target(mem), self.ret_w(mem)

    # -- convenience -----------------------------------------------------
    def pair_log_probs(self, z, mem, g) -> np.ndarray:
        """(B, n, n) log-probabilities over admissible pairs.

        The factorized tool/target heads are combined, masked to the
        admissible support (target not the end-effector, not the tool) and
        renormalized, so each row sums to one over that support.
        """
        with no_grad():
            tool_logp, target_logp = self.high_forward(z, mem, g)
        joint = tool_logp.data[..., :, None] + target_logp.data[..., None, :]
        mask = pair_mask(self.n)
        joint = np.where(mask, joint, -np.inf)
        flat = joint.reshape(joint.shape[:-2] + (-1,))
        m = flat.max(axis=-1, keepdims=True)
        logz = m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))
        return joint - logz[..., None]

    def save(self, path):
        self.store.save(path)

    @staticmethod
    def load(path, cfg: PolicyConfig | None = None) -> "PolicyStack":
        probe = ParamStore()
        probe.load(path)
        n = int(probe.meta["n"])
        stack = PolicyStack(n, cfg)
        stack.store.load(path)
        return stack


# -- analytic priors -----------------------------------------------------


def prior_tool_sequence(demo: Demonstration, pos_scale: float = 1.0) -> np.ndarray:
    """Per-frame tool index: the non-effector object with the most motion
    relative to the other non-effector objects; the end-effector when they
    are all mutually stationary.  The last frame repeats the previous one.
    """
    rel = demo.rel_stack()  # (H, n, n, 7)
    H, n = rel.shape[0], rel.shape[1]
    deltas = pose_delta_many(rel[1:], rel[:-1])  # (H-1, n, n, 7)
    norms = np.sqrt(
        np.sum((pos_scale * deltas[..., :3]) ** 2, axis=-1) + np.sum(deltas[..., 3:] ** 2, axis=-1)
    )  # (H-1, n, n)
    motion = norms[:, 1:, 1:].sum(axis=2)  # candidates x non-effector frames
    tools = np.where(motion.max(axis=1) < STATIONARY_MOTION_EPS, EE_INDEX,
                     motion.argmax(axis=1) + 1)
    return np.concatenate([tools, tools[-1:]])


def prior_high_log_probs(prev_target: int | None, n: int, gamma: float) -> np.ndarray:
    """Log-probabilities over target indices (end-effector gets -inf).

    Keeps the previous target with probability gamma and spreads
    (1 - gamma) / (n - 2) over the other admissible targets; uniform over
    admissible targets when there is no previous assignment.
    """
    if n < 3:
        raise ValueError("prior needs n >= 3")
    probs = np.zeros(n)
    if prev_target is None:
        probs[1:] = 1.0 / (n - 1)
    else:
        if not 1 <= prev_target < n:
            raise ValueError(f"previous target {prev_target} inadmissible")
        probs[1:] = (1.0 - gamma) / (n - 2)
        probs[prev_target] = gamma
    with np.errstate(divide="ignore"):
        return np.log(probs)


def prior_mid_log_probs(
    w_norms: np.ndarray, k_candidates: np.ndarray, t: int, alpha: float, beta: float
) -> np.ndarray:
    """Normalized log-probabilities over way-point candidate frames at step t.

    Candidates k < t are excluded by construction; k == t carries mass
    beta and the future candidates share (1 - beta) uniformly, each then
    reweighted by exp(-alpha * distance-of-w_k-from-identity) and
    renormalized.
    """
    k_candidates = np.asarray(k_candidates)
    if np.any(k_candidates < t):
        raise ValueError("way-point candidates must satisfy k >= t")
    future = k_candidates > t
    n_future = int(future.sum())
    log_w = -alpha * np.asarray(w_norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        if n_future == 0:
            log_cat = np.zeros_like(log_w)
        else:
            log_cat = np.where(future, np.log((1.0 - beta) / n_future), np.log(beta))
    logits = log_w + log_cat
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


def reach_log_density(
    observed_delta: np.ndarray,
    rel: np.ndarray,
    waypoint: np.ndarray,
    max_step: float,
    sigma: float,
) -> np.ndarray:
    """Closed-form straight-line reach score: Gaussian around the clipped
    step from `rel` toward `waypoint`, broadcast over leading axes.
    """
    direction = pose_delta_many(waypoint, rel)
    step_len = np.linalg.norm(direction[..., :3], axis=-1, keepdims=True)
    scale = np.where(step_len > max_step, max_step / np.maximum(step_len, 1e-300), 1.0)
    mean = direction * scale
    z = (np.asarray(observed_delta) - mean) / sigma
    return np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * np.log(2.0 * np.pi), axis=-1)


def waypoint_norms(rel_stack: np.ndarray, pos_scale: float = 1.0) -> np.ndarray:
    """identity-offset of every rel entry: (H, n, n)."""
    return identity_offset(rel_stack, pos_scale)


def estimate_step_scale(demos) -> float:
    """Median per-frame end-effector translation across the demonstrations.

    The straight-line reach model predicts a step of this length toward
    the way-point; tying it to the data (rather than the action bound)
    keeps right-direction candidates clearly ahead of stationary ones.
    """
    steps = []
    for demo in demos:
        ee = demo.ee_stack()
        steps.append(np.linalg.norm(np.diff(ee[:, :3], axis=0), axis=1))
    all_steps = np.concatenate(steps)
    moving = all_steps[all_steps > 1e-6]
    if len(moving) == 0:
        return 0.05
    return float(np.median(moving))


def init_low_level(
    stack: PolicyStack,
    demos,
    iterations: int = 800,
    batch: int = 512,
    lr: float = 1e-3,
    seed: int = 0,
):
    """Distill clipped straight-line reaching into the low-level head.

    Samples random (frame, tool, target) with a random future frame as the
    way-point, and maximizes the action likelihood of the straight
    (clipped) step from the current relative pose toward it.  The last
    quarter of the iterations run at a fifth of the learning rate, which
    settles the direction field noticeably.
    """
    if not demos:
        raise ValueError("init_low_level needs at least one demonstration")
    rng = np.random.default_rng(seed)
    cfg = stack.cfg
    cap = cfg.reach_step if cfg.reach_step > 0 else estimate_step_scale(demos)
    rels = [d.rel_stack() for d in demos]
    horizons = np.array([r.shape[0] for r in rels])
    n = stack.n
    losses = []
    decay_at = int(0.75 * iterations)
    for it in range(iterations):
        step_lr = lr if it < decay_at else lr / 5.0
        d_idx = rng.integers(0, len(demos), size=batch)
        tools = rng.integers(0, n, size=batch)
        targets = rng.integers(1, n, size=batch)
        hs = horizons[d_idx]
        ts = (rng.random(batch) * (hs - 1)).astype(np.intp)
        ks = ts + (rng.random(batch) * (hs - ts)).astype(np.intp)
        rel_rows = np.empty((batch, 7))
        way_rows = np.empty((batch, 7))
        for b in range(batch):
            R = rels[d_idx[b]]
            rel_rows[b] = R[ts[b], tools[b], targets[b]]
            way_rows[b] = R[ks[b], tools[b], targets[b]]
        act_rows = pose_delta_many(way_rows, rel_rows)
        step_len = np.linalg.norm(act_rows[:, :3], axis=1, keepdims=True)
        act_rows *= np.where(step_len > cap, cap / np.maximum(step_len, 1e-300), 1.0)
        logp = stack.low_logpdf(act_rows, rel_rows, way_rows, tools, targets)
        loss = -1.0 * tsum(logp) * (1.0 / batch)
        stack.store.zero_grad()
        loss.backward()
        stack.store.adam_step(step_lr)
        losses.append(loss.item())
    return losses
