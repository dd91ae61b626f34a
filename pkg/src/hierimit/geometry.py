"""SE(3) pose algebra on position + scalar-first unit quaternions.

Every pose in the system is a position (meters) plus a unit quaternion in
(w, x, y, z) order, stored in the canonical hemisphere (w >= 0; if w == 0,
the first nonzero component is >= 0).  The 7-vector form is the
concatenation [px, py, pz, qw, qx, qy, qz] and is the currency for
way-points, actions and all pose differences.

Differences between poses are plain component-wise 7-vector subtractions
after flipping the second quaternion into the hemisphere nearest the
first (dot >= 0).  This keeps subtraction smooth near identity and free
of double-cover sign jumps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY_VEC7 = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
IDENTITY_VEC7.setflags(write=False)


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    """Normalize and move a (w,x,y,z) quaternion into the canonical hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    norm = float(np.sqrt(np.dot(q, q)))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("quaternion has zero or non-finite norm")
    if abs(norm - 1.0) > 1e-12:
        q = q / norm
    # hemisphere: w >= 0; on the w == 0 boundary, first nonzero >= 0
    for c in q:
        if c > 0.0:
            break
        if c < 0.0:
            q = -q
            break
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w,x,y,z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion."""
    w, x, y, z = q
    # R(q) @ v expanded; cheaper than building the matrix
    t = 2.0 * np.cross(np.array([x, y, z]), v)
    return v + w * t + np.cross(np.array([x, y, z]), t)


@dataclass(frozen=True, eq=False)
class Pose:
    """A rigid pose: position in meters + canonical unit quaternion."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_VEC7[3:].copy())

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        q = _canonical_quat(np.asarray(self.orientation, dtype=np.float64).reshape(4))
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_vec7(v: np.ndarray) -> "Pose":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return Pose(v[:3], v[3:])

    @property
    def vec7(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def approx_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.all(np.abs(self.position - other.position) <= tol)
            and np.all(np.abs(self.orientation - other.orientation) <= tol)
        )

    def __repr__(self):  # compact, debugging only
        p, q = self.position, self.orientation
        return f"Pose(p=[{p[0]:.4g},{p[1]:.4g},{p[2]:.4g}], q=[{q[0]:.4g},{q[1]:.4g},{q[2]:.4g},{q[3]:.4g}])"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame b expressed through frame a (a then b)."""
    return Pose(
        a.position + quat_rotate(a.orientation, b.position),
        quat_mul(a.orientation, b.orientation),
    )


def inverse(a: Pose) -> Pose:
    q_inv = a.orientation * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(-quat_rotate(q_inv, a.position), q_inv)


def relative_pose(world_i: Pose, world_j: Pose) -> Pose:
    """Pose of object i in the frame of object j: inverse(world_j) o world_i."""
    return compose(inverse(world_j), world_i)


def align_quat_sign(a_quat: np.ndarray, b_quat: np.ndarray) -> np.ndarray:
    """Return b_quat flipped (if needed) into the hemisphere nearest a_quat."""
    if float(np.dot(a_quat, b_quat)) < 0.0:
        return -b_quat
    return b_quat


def pose_delta(a, b) -> np.ndarray:
    """Component-wise a - b on 7-vectors, with b's quaternion sign-aligned to a's."""
    av = a.vec7 if isinstance(a, Pose) else np.asarray(a, dtype=np.float64).reshape(7)
    bv = b.vec7 if isinstance(b, Pose) else np.asarray(b, dtype=np.float64).reshape(7)
    out = av - bv
    if float(np.dot(av[3:], bv[3:])) < 0.0:
        out[3:] = av[3:] + bv[3:]
    return out


def pose_delta_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized pose_delta over leading axes; a, b broadcastable (..., 7)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = np.sum(a[..., 3:] * b[..., 3:], axis=-1, keepdims=True)
    sign = np.where(dot < 0.0, -1.0, 1.0)
    return np.concatenate([a[..., :3] - b[..., :3], a[..., 3:] - sign * b[..., 3:]], axis=-1)


def norm7(v: np.ndarray, pos_scale: float = 1.0) -> np.ndarray:
    """Euclidean norm of 7-vectors with the position block scaled by pos_scale.

    The scale keeps the meters-vs-quaternion mix explicit; default 1.0.
    """
    v = np.asarray(v, dtype=np.float64)
    sq = np.sum((pos_scale * v[..., :3]) ** 2, axis=-1) + np.sum(v[..., 3:] ** 2, axis=-1)
    return np.sqrt(sq)


def identity_offset(v: np.ndarray, pos_scale: float = 1.0) -> np.ndarray:
    """Distance of a pose 7-vector from the identity pose (sign-aligned)."""
    v = np.asarray(v, dtype=np.float64)
    ident = np.broadcast_to(IDENTITY_VEC7, v.shape)
    return norm7(pose_delta_many(v, ident), pos_scale)


def add_delta(pose: Pose, delta: np.ndarray) -> Pose:
    """Apply a 7-vector delta to a pose: component-wise add, then renormalize.

    Inverts pose_delta whenever the two quaternions already share a
    hemisphere (always true for the small per-step deltas used as actions).
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(7)
    return Pose(pose.position + delta[:3], pose.orientation + delta[3:])


def yaw_of(q: np.ndarray) -> float:
    """Rotation of a (w,x,y,z) quaternion about the world z axis, radians."""
    w, x, y, z = q
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def yaw_quat(angle: float) -> np.ndarray:
    """Quaternion for a rotation of `angle` radians about the z axis."""
    half = 0.5 * angle
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])
