"""Quaternion and rotation utilities shared by every other module.

Conventions used throughout the package:

- Quaternions are Hamilton, stored scalar-first as ``[w, x, y, z]``.
- ``q_b_w`` denotes the attitude of the body frame b in the world frame w,
  so ``v_w = quat_to_rot(q_b_w) @ v_b``.
- Attitude increments multiply on the right in the body frame:
  ``q' = q * exp(delta_theta)`` (see :func:`pose_boxplus`).  Every analytic
  Jacobian in the package assumes this update.
- No sign canonicalization happens inside arithmetic; ``quat_canonical``
  (w >= 0) is applied only at serialization boundaries.

All functions are pure and operate on plain float64 numpy arrays, so they
are safe to call concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def _require_unit(q: np.ndarray) -> None:
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"quaternion is not unit length: |q| = {n:.9f}")


def quat_normalize(q) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=float)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_canonical(q) -> np.ndarray:
    """Flip sign so w >= 0. Used only when writing quaternions out."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0.0 else q.copy()


def quat_mul(p, q) -> np.ndarray:
    """Hamilton product p * q, renormalized."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _require_unit(p)
    _require_unit(q)
    return quat_normalize(_raw_mul(p, q))


def _raw_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = p
    w2, x2, y2, z2 = q
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    """Conjugate [w, -x, -y, -z]."""
    q = np.asarray(q, dtype=float)
    _require_unit(q)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_inv(q) -> np.ndarray:
    """Inverse; equals the conjugate for unit quaternions."""
    return quat_conj(q)


def pure_quat(v) -> np.ndarray:
    """Embed a 3-vector as [0, vx, vy, vz]."""
    v = np.asarray(v, dtype=float)
    return np.array([0.0, v[0], v[1], v[2]])


def left_qmat(q) -> np.ndarray:
    """4x4 matrix L with L @ vec(p) = vec(q * p)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def right_qmat(q) -> np.ndarray:
    """4x4 matrix R with R @ vec(p) = vec(p * q)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def omega_mat(w) -> np.ndarray:
    """4x4 angular-rate matrix: q_dot = 0.5 * omega_mat(w) @ vec(q).

    Equivalent to right_qmat(pure_quat(w)); the sign of the lower-right
    3x3 block follows from the scalar-first component order, which is
    checked against quat_mul in the tests rather than assumed.
    """
    return right_qmat(pure_quat(np.asarray(w, dtype=float)))


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix: skew(a) @ b = a x b."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def small_angle_quat(dtheta) -> np.ndarray:
    """First-order rotation quaternion [1, dtheta/2], normalized."""
    d = np.asarray(dtheta, dtype=float)
    return quat_normalize(np.array([1.0, 0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]))


def so3_exp(phi) -> np.ndarray:
    """Exponential map: rotation vector -> unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    half = 0.5 * angle
    if angle < 1e-6:
        # sin(half)/angle Taylor branch avoids 0/0
        s = 0.5 - angle * angle / 48.0
    else:
        s = math.sin(half) / angle
    return quat_normalize(np.array([math.cos(half), s * phi[0], s * phi[1], s * phi[2]]))


def so3_log(q) -> np.ndarray:
    """Log map: unit quaternion -> rotation vector with magnitude in [0, pi]."""
    q = np.asarray(q, dtype=float)
    _require_unit(q)
    if q[0] < 0.0:
        q = -q
    vn = math.sqrt(q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
    if vn < 1e-6:
        # atan2 branch degenerates; use the series 2 v / w * (1 - |v|^2 / (3 w^2))
        scale = 2.0 / q[0] * (1.0 - vn * vn / (3.0 * q[0] * q[0]))
    else:
        scale = 2.0 * math.atan2(vn, q[0]) / vn
    return scale * q[1:4]


def quat_to_rot(q) -> np.ndarray:
    """Unit quaternion -> 3x3 rotation matrix (same frame mapping)."""
    w, x, y, z = np.asarray(q, dtype=float)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def rot_to_quat(R) -> np.ndarray:
    """3x3 rotation matrix -> unit quaternion (w >= 0), Shepperd's method."""
    R = np.asarray(R, dtype=float)
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_rotate(q, v) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion."""
    return quat_to_rot(q) @ np.asarray(v, dtype=float)


def pose_boxplus(q, dtheta) -> np.ndarray:
    """Right (body-frame) attitude update q * exp(dtheta).

    This is the manifold update applied by the solver; every analytic
    attitude Jacobian is taken with respect to this perturbation.
    """
    d = np.asarray(dtheta, dtype=float)
    if np.linalg.norm(d) >= math.pi:
        raise ValueError("attitude increment magnitude must be below pi")
    return quat_mul(q, so3_exp(d))


def yaw_of(R) -> float:
    """Heading angle (ZYX convention) of a rotation matrix."""
    return math.atan2(R[1, 0], R[0, 0])


def rot_z(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def cross3(a, b) -> np.ndarray:
    """Cross product for plain 3-vectors (faster than np.cross here)."""
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def tangent_basis(u) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal vectors spanning the plane orthogonal to unit u.

    Deterministic rule: b1 = normalize(u x e) with e = x-axis unless
    |u . x| > 0.9 (then e = z-axis); b2 = u x b1.
    """
    u = np.asarray(u, dtype=float)
    e = np.array([1.0, 0.0, 0.0])
    if abs(u @ e) > 0.9:
        e = np.array([0.0, 0.0, 1.0])
    b1 = cross3(u, e)
    b1 /= math.sqrt(b1 @ b1)
    b2 = cross3(u, b1)
    return b1, b2


@dataclass
class Pose:
    """Rigid transform: rotation (unit quaternion) plus translation (m)."""
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.t = np.asarray(self.t, dtype=float)

    @staticmethod
    def identity() -> "Pose":
        return Pose(IDENTITY_QUAT.copy(), np.zeros(3))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Rigid-body chaining: (a * b).transform(p) == a.transform(b.transform(p))."""
    return Pose(quat_mul(a.q, b.q), a.t + quat_to_rot(a.q) @ b.t)


def pose_inverse(a: Pose) -> Pose:
    """Inverse transform; translation is -R^T t."""
    Rt = quat_to_rot(a.q).T
    return Pose(quat_inv(a.q), -(Rt @ a.t))


def pose_transform(a: Pose, p) -> np.ndarray:
    """Apply the transform to a point."""
    return quat_to_rot(a.q) @ np.asarray(p, dtype=float) + a.t
