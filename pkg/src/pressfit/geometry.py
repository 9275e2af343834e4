"""Rotation and pose math on unit quaternions.

Conventions, fixed across the whole codebase:
  * quaternions are numpy float64 arrays [w, x, y, z], unit norm;
  * canonical sign is w >= 0 (applied when serializing, and on request);
  * rotation matrices are world_from_body, vectors are column vectors;
  * the 6D rotation encoding is the first two matrix columns, column-major;
  * spherical coordinates: theta is the polar angle from +z, phi the
    azimuth from +x, both in the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput

_EPS = 1e-12
# below this residual norm the 6D decode is treated as collinear
_GS_EPS = 1e-8


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < _EPS:
        raise DegenerateInput("quaternion norm too small to normalize")
    return q / n


def quat_canonical(q) -> np.ndarray:
    """Fix the sign ambiguity: w >= 0, ties broken by the first nonzero component."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c > 0.0:
            return q.copy()
        if c < 0.0:
            return -q
    raise DegenerateInput("zero quaternion has no canonical form")


def quat_multiply(q0, q1) -> np.ndarray:
    w0, x0, y0, z0 = q0
    w1, x1, y1, z1 = q1
    return np.array([
        w0 * w1 - x0 * x1 - y0 * y1 - z0 * z1,
        w0 * x1 + x0 * w1 + y0 * z1 - z0 * y1,
        w0 * y1 - x0 * z1 + y0 * w1 + z0 * x1,
        w0 * z1 + x0 * y1 - y0 * x1 + z0 * w1,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by quaternion q (expects q unit norm)."""
    w = q[0]
    u = np.asarray(q[1:], dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    # Rodrigues in quaternion form: v + 2w(u x v) + 2 u x (u x v)
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = float(np.linalg.norm(axis))
    if n < _EPS:
        raise DegenerateInput("rotation axis has zero norm")
    half = 0.5 * float(angle)
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * (axis / n)
    return q


def quat_from_rotvec(rv) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    rv = np.asarray(rv, dtype=np.float64)
    angle = float(np.linalg.norm(rv))
    if angle < _EPS:
        # first-order expansion keeps the map smooth through zero
        q = np.empty(4)
        q[0] = 1.0
        q[1:] = 0.5 * rv
        return quat_normalize(q)
    return quat_from_axis_angle(rv, angle)


def quat_to_rotvec(q) -> np.ndarray:
    """Log map: quaternion to rotation vector, angle in [0, pi]."""
    q = quat_canonical(q)
    w = min(1.0, max(-1.0, float(q[0])))
    s = float(np.linalg.norm(q[1:]))
    angle = 2.0 * np.arctan2(s, w)
    if s < _EPS:
        return 2.0 * np.asarray(q[1:], dtype=np.float64)
    return (angle / s) * np.asarray(q[1:], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Rotation matrix to quaternion, numerically stable for all trace signs."""
    m = np.asarray(m, dtype=np.float64)
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_geodesic(q0, q1) -> float:
    """Angular distance between two rotations, in [0, pi]. Sign-invariant.

    Uses the atan2 form (4*atan2(|q0-q1|, |q0+q1|) after sign alignment),
    which stays accurate near 0 where 2*acos(dot) bottoms out around 1e-8.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if float(np.dot(q0, q1)) < 0.0:
        q1 = -q1
    return 4.0 * float(np.arctan2(np.linalg.norm(q0 - q1), np.linalg.norm(q0 + q1)))


def slerp(q0, q1, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc.

    t = 0 returns q0, t = 1 returns q1 (up to quaternion sign); the traversed
    angle is proportional to t. Antipodal inputs (dot == 0 within 1e-12) have
    no unique shorter arc; the tie is broken deterministically by flipping q1
    to the sign that makes its vector part's first nonzero component positive.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot < _EPS:
        # rotations are pi apart; pick the arc through q1's canonical sign
        flip = 1.0
        for c in q1[1:]:
            if c > 0.0:
                break
            if c < 0.0:
                flip = -1.0
                break
        q1 = q1 * flip
        dot = float(np.dot(q0, q1))
    if dot > 1.0 - 1e-10:
        # nearly identical: nlerp avoids 0/0 and is exact to first order
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(min(1.0, dot))
    s = np.sin(theta)
    return (np.sin((1.0 - t) * theta) / s) * q0 + (np.sin(t * theta) / s) * q1


def encode_rot6d(q) -> np.ndarray:
    """First two columns of the rotation matrix, column-major, as 6 floats."""
    m = quat_to_matrix(q)
    return np.concatenate([m[:, 0], m[:, 1]])


def decode_rot6d(r6) -> np.ndarray:
    """Gram-Schmidt a 6-vector back to a unit quaternion.

    The decoded frame is c1 = normalize(a1), c2 = the component of a2
    orthogonal to c1 (normalized), c3 = c1 x c2. Raises DegenerateInput when
    a1 is near zero or a2 is near collinear with a1 (residual <= 1e-8).
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape != (6,):
        raise DegenerateInput(f"6D rotation encoding must have shape (6,), got {r6.shape}")
    a1, a2 = r6[:3], r6[3:]
    n1 = float(np.linalg.norm(a1))
    if n1 <= _GS_EPS:
        raise DegenerateInput("6D decode: first column has near-zero norm")
    c1 = a1 / n1
    res = a2 - float(np.dot(c1, a2)) * c1
    n2 = float(np.linalg.norm(res))
    if n2 <= _GS_EPS:
        raise DegenerateInput("6D decode: columns are near collinear")
    c2 = res / n2
    c3 = np.cross(c1, c2)
    return quat_from_matrix(np.stack([c1, c2, c3], axis=1))


def quat_yaw(q) -> float:
    """ZYX yaw component: heading about the world z axis, in (-pi, pi]."""
    w, x, y, z = q
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def yaw_symmetric_angle(q_ref, q, order: int) -> float:
    """Orientation error of q against q_ref, ignoring yaw symmetry.

    order = 0 means a continuous symmetry about the reference z axis (any yaw
    is acceptable); order = n > 1 means the n discrete yaws 2*pi*k/n are all
    acceptable. order = 1 is the plain geodesic distance.
    """
    q_rel = quat_multiply(quat_conjugate(q_ref), q)
    if order == 0:
        w, x, y, z = q_rel
        # swing-twist: residual tilt after the best yaw about z
        return 2.0 * float(np.arctan2(np.hypot(x, y), np.hypot(w, z)))
    if order < 1:
        raise DegenerateInput(f"symmetry order must be 0 or >= 1, got {order}")
    best = np.inf
    for k in range(order):
        qz = quat_from_axis_angle([0.0, 0.0, 1.0], 2.0 * np.pi * k / order)
        best = min(best, quat_geodesic(quat_multiply(q_rel, qz), quat_identity()))
    return float(best)


def sample_spherical_offset(rng: np.random.Generator, r_range, theta_range, phi_range) -> np.ndarray:
    """Offset vector from independent uniform draws of r, theta, phi.

    theta is measured from +z, phi from +x, world frame. Deliberately not
    area-uniform on the sphere: each coordinate is uniform on its interval.
    """
    for name, (lo, hi) in (("r", r_range), ("theta", theta_range), ("phi", phi_range)):
        if hi < lo:
            raise DegenerateInput(f"{name} range inverted: [{lo}, {hi}]")
    r = rng.uniform(r_range[0], r_range[1])
    theta = rng.uniform(theta_range[0], theta_range[1])
    phi = rng.uniform(phi_range[0], phi_range[1])
    st = np.sin(theta)
    return r * np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def random_quat(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (Shoemake, via 4D Gaussian normalization)."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < _EPS:
        q = rng.standard_normal(4)
    return quat_canonical(quat_normalize(q))


def random_axis(rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit vector on the sphere."""
    v = rng.standard_normal(3)
    while np.linalg.norm(v) < _EPS:
        v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


@dataclass
class Pose:
    """Rigid transform: rotate by quat, then translate by position."""

    position: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.quat = quat_normalize(self.quat)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), quat_identity())

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply other first, then self."""
        return Pose(self.position + quat_rotate(self.quat, other.position),
                    quat_multiply(self.quat, other.quat))

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.quat)
        return Pose(-quat_rotate(qinv, self.position), qinv)

    def transform_point(self, p) -> np.ndarray:
        return self.position + quat_rotate(self.quat, p)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.quat.copy())
