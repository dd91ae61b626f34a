"""Demonstration data model, wire format, validation and downsampling.

A demonstration is an ordered sequence of per-frame observations.  Each
observation carries the end-effector world pose, the (static) semantic
label list, and the full n x n relative-pose matrix `rel`, where
rel[i, j] is the 7-vector pose of object i expressed in object j's frame.
Object 0 is always the end-effector, under the reserved label "ee".

Wire format (UTF-8 text, one frame per line):

    # optional comments / blank lines anywhere
    task=<id> n=<int> labels=<name0,name1,...>
    t=<float> ee=<7 floats> rel=<n*n*7 floats row-major> [gt=<i>,<j>,<k>] [pl=<i>,<j>,<k>]

All floats are serialized with 9 significant digits.  Poses created by
the producers in this package are passed through `wire_float` /
`wire_quat` first, which makes save -> load round-trips bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import IDENTITY_VEC7, Pose, _canonical_quat, compose, inverse, relative_pose

EE_LABEL = "ee"
EE_INDEX = 0


class ParseError(ValueError):
    """A line of a demonstration file could not be parsed."""


class ValidationError(ValueError):
    """A structurally valid file violated a demonstration invariant."""


class ArgumentError(ValueError):
    """Bad argument to a trajectory operation."""


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def wire_float(x: float) -> float:
    """Quantize a float to its 9-significant-digit wire representation."""
    return float(_fmt(x))


def wire_quat(q: np.ndarray) -> np.ndarray:
    """Fixpoint of normalize-then-quantize for a quaternion.

    The returned value is exactly what `normalize(parse(format(q)))`
    produces, so writing it with 9 significant digits and reading it back
    through the Pose constructor reproduces it bit-for-bit.
    """
    q = np.asarray(q, dtype=np.float64)
    for _ in range(8):
        n = Pose(np.zeros(3), q).orientation  # normalize + canonicalize
        q2 = np.array([wire_float(v) for v in n])
        if np.array_equal(q2, q):
            return Pose(np.zeros(3), q2).orientation
        q = q2
    return Pose(np.zeros(3), q).orientation


def wire_pose(p: Pose) -> Pose:
    return Pose(np.array([wire_float(v) for v in p.position]), wire_quat(p.orientation))


def wire_rel_matrix(rel: np.ndarray) -> np.ndarray:
    """Quantize every off-diagonal relative pose to its wire representation."""
    rel = np.array(rel, copy=True)
    n = rel.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j:
                rel[i, j, :3] = [wire_float(v) for v in rel[i, j, :3]]
                rel[i, j, 3:] = wire_quat(rel[i, j, 3:])
    return rel


@dataclass(frozen=True)
class SubTaskLabel:
    """Hidden per-frame assignment: tool index, target index, way-point frame."""

    tool: int
    target: int
    waypoint_frame: int

    def astuple(self):
        return (self.tool, self.target, self.waypoint_frame)


@dataclass(frozen=True, eq=False)
class Observation:
    """One frame: end-effector pose, label list, and the relative-pose matrix."""

    end_effector: Pose
    labels: tuple
    rel: np.ndarray  # (n, n, 7), rel[i, j] = pose of i in frame of j
    timestamp: float

    def __post_init__(self):
        r = np.asarray(self.rel, dtype=np.float64)
        r.setflags(write=False)
        object.__setattr__(self, "rel", r)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return len(self.labels)

    def rel_pose(self, i: int, j: int) -> Pose:
        return Pose.from_vec7(self.rel[i, j])

    def world_pose(self, i: int) -> Pose:
        """World pose of object i, reconstructed through the end-effector."""
        if i == EE_INDEX:
            return self.end_effector
        return compose(self.end_effector, self.rel_pose(i, EE_INDEX))


@dataclass(frozen=True, eq=False)
class Demonstration:
    frames: tuple
    task_id: str
    ground_truth: Optional[tuple] = None
    pseudo_labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        if self.pseudo_labels is not None:
            object.__setattr__(self, "pseudo_labels", tuple(self.pseudo_labels))

    @property
    def horizon(self) -> int:
        return len(self.frames)

    @property
    def n(self) -> int:
        return self.frames[0].n

    @property
    def labels(self) -> tuple:
        return self.frames[0].labels

    def rel_stack(self) -> np.ndarray:
        """All relative-pose matrices stacked to (H, n, n, 7)."""
        return np.stack([f.rel for f in self.frames])

    def ee_stack(self) -> np.ndarray:
        return np.stack([f.end_effector.vec7 for f in self.frames])


def build_rel_matrix(world_poses: Sequence[Pose]) -> np.ndarray:
    """(n, n, 7) matrix of pairwise relative poses; diagonal is the identity."""
    n = len(world_poses)
    if n < 2:
        raise ArgumentError("need at least 2 world poses")
    inv = [inverse(p) for p in world_poses]
    rel = np.empty((n, n, 7))
    for i in range(n):
        for j in range(n):
            if i == j:
                rel[i, j] = IDENTITY_VEC7
            else:
                rel[i, j] = compose(inv[j], world_poses[i]).vec7
    return rel


def validate_demo(demo: Demonstration) -> None:
    """Check all Observation / Demonstration invariants; raise ValidationError."""
    if demo.horizon < 2:
        raise ValidationError(f"demonstration '{demo.task_id}' has fewer than 2 frames")
    n = demo.n
    labels = demo.labels
    if labels.count(EE_LABEL) != 1 or labels[EE_INDEX] != EE_LABEL:
        raise ValidationError(f"labels must contain '{EE_LABEL}' exactly once at index {EE_INDEX}")
    prev_t = -np.inf
    for f_idx, obs in enumerate(demo.frames):
        if obs.labels != labels or obs.n != n:
            raise ValidationError(f"frame {f_idx}: label list differs from frame 0")
        if obs.rel.shape != (n, n, 7):
            raise ValidationError(f"frame {f_idx}: rel shape {obs.rel.shape} != {(n, n, 7)}")
        if not obs.timestamp > prev_t:
            raise ValidationError(f"frame {f_idx}: timestamps not strictly increasing")
        prev_t = obs.timestamp
        for i in range(n):
            if not np.allclose(obs.rel[i, i], IDENTITY_VEC7, atol=1e-9):
                raise ValidationError(f"frame {f_idx}: rel[{i}][{i}] is not the identity")
        for i in range(n):
            for j in range(i + 1, n):
                back = inverse(obs.rel_pose(i, j)).vec7
                if not np.allclose(back, obs.rel[j, i], atol=1e-6):
                    raise ValidationError(
                        f"frame {f_idx}: rel[{j}][{i}] is not the inverse of rel[{i}][{j}]"
                    )
    for name, seq in (("gt", demo.ground_truth), ("pl", demo.pseudo_labels)):
        if seq is None:
            continue
        if len(seq) != demo.horizon:
            raise ValidationError(f"{name} labels: length {len(seq)} != horizon {demo.horizon}")
        for t, lab in enumerate(seq):
            if lab.target == EE_INDEX:
                raise ValidationError(f"{name} frame {t}: target is the end-effector")
            if not (0 <= lab.tool < n and 0 < lab.target < n):
                raise ValidationError(f"{name} frame {t}: object index out of range")
            if not (t <= lab.waypoint_frame < demo.horizon):
                raise ValidationError(
                    f"{name} frame {t}: waypoint_frame {lab.waypoint_frame} out of range"
                )


def _parse_label_triple(text: str, lineno: int) -> SubTaskLabel:
    parts = text.split(",")
    if len(parts) != 3:
        raise ParseError(f"line {lineno}: label field needs 3 ints, got '{text}'")
    try:
        i, j, k = (int(p) for p in parts)
    except ValueError as e:
        raise ParseError(f"line {lineno}: bad label field '{text}'") from e
    return SubTaskLabel(i, j, k)


def _parse_floats(text: str, count: int, lineno: int, what: str) -> np.ndarray:
    vals = text.split(",")
    if len(vals) != count:
        raise ParseError(f"line {lineno}: {what} needs {count} floats, got {len(vals)}")
    try:
        return np.array([float(v) for v in vals])
    except ValueError as e:
        raise ParseError(f"line {lineno}: bad float in {what}") from e


def load_demos(path) -> list:
    """Load every demonstration in a file (or in all *.demo files of a dir)."""
    path = Path(path)
    if path.is_dir():
        demos = []
        for f in sorted(path.glob("*.demo")):
            demos.extend(load_demos(f))
        return demos

    demos = []
    header = None
    frames: list = []
    gt: list = []
    pl: list = []

    def flush():
        nonlocal header, frames, gt, pl
        if header is None:
            return
        task_id, n, labels = header
        demo = Demonstration(
            frames=tuple(frames),
            task_id=task_id,
            ground_truth=tuple(gt) if len(gt) == len(frames) and gt else None,
            pseudo_labels=tuple(pl) if len(pl) == len(frames) and pl else None,
        )
        if gt and len(gt) != len(frames):
            raise ValidationError(f"'{task_id}': gt on some frames but not all")
        if pl and len(pl) != len(frames):
            raise ValidationError(f"'{task_id}': pl on some frames but not all")
        validate_demo(demo)
        demos.append(demo)
        header, frames, gt, pl = None, [], [], []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise ParseError(f"line {lineno}: token '{token}' is not key=value")
                key, _, val = token.partition("=")
                fields[key] = val
            if "task" in fields:
                flush()
                try:
                    n = int(fields["n"])
                except (KeyError, ValueError) as e:
                    raise ParseError(f"line {lineno}: header needs integer n") from e
                if "labels" not in fields:
                    raise ParseError(f"line {lineno}: header missing labels")
                labels = tuple(fields["labels"].split(","))
                if len(labels) != n:
                    raise ParseError(f"line {lineno}: {len(labels)} labels for n={n}")
                header = (fields["task"], n, labels)
                continue
            if header is None:
                raise ParseError(f"line {lineno}: frame before header")
            task_id, n, labels = header
            if "t" not in fields or "ee" not in fields or "rel" not in fields:
                raise ParseError(f"line {lineno}: frame needs t=, ee=, rel=")
            try:
                ts = float(fields["t"])
            except ValueError as e:
                raise ParseError(f"line {lineno}: bad timestamp") from e
            ee = _parse_floats(fields["ee"], 7, lineno, "ee")
            rel = _parse_floats(fields["rel"], n * n * 7, lineno, "rel").reshape(n, n, 7)
            # normalize rel quaternions exactly like the Pose constructor,
            # so producer-side poses reload bit-for-bit
            try:
                for i in range(n):
                    for j in range(n):
                        rel[i, j, 3:] = _canonical_quat(rel[i, j, 3:])
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from e
            frames.append(
                Observation(
                    end_effector=Pose.from_vec7(ee),
                    labels=labels,
                    rel=rel,
                    timestamp=ts,
                )
            )
            if "gt" in fields:
                gt.append(_parse_label_triple(fields["gt"], lineno))
            if "pl" in fields:
                pl.append(_parse_label_triple(fields["pl"], lineno))
    flush()
    return demos


def save_demos(demos: Sequence[Demonstration], path, label_field: str = "gt") -> None:
    """Write demonstrations to one file in the wire format.

    label_field selects which label sequence rides along: "gt" writes
    ground_truth under gt=, "pl" writes pseudo_labels under pl=, "both"
    writes whichever are present.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for demo in demos:
        lines.append(f"task={demo.task_id} n={demo.n} labels={','.join(demo.labels)}")
        for t, obs in enumerate(demo.frames):
            ee = ",".join(_fmt(v) for v in obs.end_effector.vec7)
            rel = ",".join(_fmt(v) for v in obs.rel.reshape(-1))
            line = f"t={_fmt(obs.timestamp)} ee={ee} rel={rel}"
            if label_field in ("gt", "both") and demo.ground_truth is not None:
                i, j, k = demo.ground_truth[t].astuple()
                line += f" gt={i},{j},{k}"
            if label_field in ("pl", "both") and demo.pseudo_labels is not None:
                i, j, k = demo.pseudo_labels[t].astuple()
                line += f" pl={i},{j},{k}"
            lines.append(line)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def downsample(demo: Demonstration, target_len: int) -> Demonstration:
    """Keep first/last frames plus a near-uniform stride of the rest.

    Label sequences are subsampled at the retained indices and each
    waypoint_frame is remapped to the nearest retained frame at or after it.
    """
    H = demo.horizon
    if not (2 <= target_len <= H):
        raise ArgumentError(f"target_len {target_len} outside [2, {H}]")
    keep = np.unique(np.round(np.linspace(0, H - 1, target_len)).astype(int))
    pos_of = {int(old): new for new, old in enumerate(keep)}

    def remap_wp(k: int) -> int:
        # nearest retained index >= k; the last frame is always retained
        idx = int(np.searchsorted(keep, k, side="left"))
        return pos_of[int(keep[idx])]

    def remap_labels(seq):
        if seq is None:
            return None
        out = []
        for new_t, old_t in enumerate(keep):
            lab = seq[int(old_t)]
            out.append(SubTaskLabel(lab.tool, lab.target, max(new_t, remap_wp(lab.waypoint_frame))))
        return tuple(out)

    return Demonstration(
        frames=tuple(demo.frames[int(i)] for i in keep),
        task_id=demo.task_id,
        ground_truth=remap_labels(demo.ground_truth),
        pseudo_labels=remap_labels(demo.pseudo_labels),
    )
