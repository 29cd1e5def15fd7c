"""Visual-inertial initialization alignment.

Transfers up-to-scale camera poses to IMU centers, stacks a linear system in
the per-frame body velocities, the gravity vector in the reference camera
frame, and the metric scale, then refines the gravity direction on its
two-dimensional tangent space and derives the world frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preintegration import PreintegrationDelta
from .quatmath import (
    quat_inv,
    quat_mul,
    quat_to_rot,
    rot_z,
    skew,
    tangent_basis,
    yaw_of,
)


class DegenerateMotionError(RuntimeError):
    """The alignment system is rank deficient (e.g. no translation)."""


class InitializationError(RuntimeError):
    """Alignment produced an unusable solution (e.g. negative scale)."""


@dataclass
class Extrinsics:
    """Camera-to-IMU transform: lever arm p_c_b (m) and rotation q_c_b."""
    p_c_b: np.ndarray
    q_c_b: np.ndarray

    def __post_init__(self):
        self.p_c_b = np.asarray(self.p_c_b, dtype=float)
        self.q_c_b = np.asarray(self.q_c_b, dtype=float)


@dataclass
class UpToScalePose:
    """Monocular camera pose relative to the reference frame; translation
    is dimensionless (metric position divided by the unknown scale)."""
    frame_id: int
    q: np.ndarray   # rotation of camera k in the reference camera frame
    p_bar: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p_bar = np.asarray(self.p_bar, dtype=float)


@dataclass
class AlignmentResult:
    velocities: list          # body-frame velocity per frame, m/s
    gravity: np.ndarray       # in the reference camera frame, m/s^2
    scale: float
    residual_norm: float
    condition: float
    converged: bool = True
    refine_iterations: int = 0


def camera_to_imu(poses: list[UpToScalePose], ext: Extrinsics):
    """Transfer each camera pose to the IMU center.

    Returns (imu_rotations, cam_positions, corrections) where
    imu_rotations[k] is q of body k in the reference camera frame and the
    scaled IMU position satisfies s * p_imu = s * cam_positions[k] -
    corrections[k].  The split keeps the relation linear in the unknown s.
    """
    if not poses:
        raise ValueError("pose list is empty")
    q_bc = quat_inv(ext.q_c_b)
    rot_imu, p_cam, corr = [], [], []
    for pose in poses:
        q_b = quat_mul(pose.q, q_bc)
        rot_imu.append(q_b)
        p_cam.append(pose.p_bar.copy())
        corr.append(quat_to_rot(q_b) @ ext.p_c_b)
    return rot_imu, p_cam, corr


@dataclass
class AlignmentPair:
    """One consecutive frame pair: its preintegrated increments and gap."""
    delta: PreintegrationDelta
    dt: float


def build_alignment_system(pairs: list[AlignmentPair],
                           poses: list[UpToScalePose],
                           ext: Extrinsics):
    """Stack the 6-per-pair linear system over (v_0..v_n, g_ref, s).

    Unknown layout: 3 per frame velocity (body frame), then 3 gravity
    components in the reference camera frame, then the scale.
    """
    n = len(poses)
    if n < 2:
        raise ValueError("alignment needs at least two frames")
    if len(pairs) != n - 1:
        raise ValueError(f"expected {n - 1} preintegration pairs, got {len(pairs)}")
    rot_imu, p_cam, corr = camera_to_imu(poses, ext)
    cols = 3 * n + 4
    A = np.zeros((6 * (n - 1), cols))
    b = np.zeros(6 * (n - 1))
    I3 = np.eye(3)
    for k, pair in enumerate(pairs):
        if pair.delta is None:
            raise ValueError(f"pair {k} is missing its preintegration")
        dt = pair.dt
        R_ref_bk = quat_to_rot(rot_imu[k]).T       # reference frame -> body k
        R_bk1_ref = quat_to_rot(rot_imu[k + 1])
        r0 = 6 * k
        va = slice(3 * k, 3 * k + 3)
        vb = slice(3 * k + 3, 3 * k + 6)
        g = slice(3 * n, 3 * n + 3)

        A[r0:r0 + 3, va] = -dt * I3
        A[r0:r0 + 3, g] = 0.5 * dt * dt * R_ref_bk
        A[r0:r0 + 3, 3 * n + 3] = R_ref_bk @ (p_cam[k + 1] - p_cam[k])
        b[r0:r0 + 3] = pair.delta.alpha - ext.p_c_b + R_ref_bk @ corr[k + 1]

        A[r0 + 3:r0 + 6, va] = -I3
        A[r0 + 3:r0 + 6, vb] = R_ref_bk @ R_bk1_ref
        A[r0 + 3:r0 + 6, g] = dt * R_ref_bk
        b[r0 + 3:r0 + 6] = pair.delta.beta
    return A, b


def solve_alignment(A: np.ndarray, b: np.ndarray) -> AlignmentResult:
    """Least-squares solve with rank diagnostics; scale is the last unknown."""
    if A.shape[0] < A.shape[1]:
        raise ValueError("alignment system is underdetermined")
    sv = np.linalg.svd(A, compute_uv=False)
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if condition > 1e8:
        raise DegenerateMotionError(
            f"alignment system is rank deficient (condition {condition:.3g}); "
            "the motion does not excite all unknowns")
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    s = float(x[-1])
    if s <= 0.0:
        raise InitializationError(f"recovered scale {s:.6f} is not positive")
    n = (A.shape[1] - 4) // 3
    vels = [x[3 * k:3 * k + 3].copy() for k in range(n)]
    res = float(np.linalg.norm(A @ x - b))
    return AlignmentResult(vels, x[3 * n:3 * n + 3].copy(), s, res, condition)


def refine_gravity(pairs, poses, ext: Extrinsics, g0, g_mag: float,
                   tol: float = 1e-6, max_iter: int = 10) -> AlignmentResult:
    """Re-solve with gravity constrained to magnitude g_mag.

    Gravity is parameterized as g_mag * g_hat + [b1 b2] w on the tangent
    plane of the current direction estimate, collapsing its three columns
    to two; iterate until the tangent update w vanishes.
    """
    g0 = np.asarray(g0, dtype=float)
    if np.linalg.norm(g0) == 0.0:
        raise ValueError("gravity seed must be non-zero")
    A, b = build_alignment_system(pairs, poses, ext)
    n = len(poses)
    gcols = slice(3 * n, 3 * n + 3)
    keep = np.r_[0:3 * n, 3 * n + 3]
    Ag = A[:, gcols]
    Ak = A[:, keep]

    g_hat = g0 / np.linalg.norm(g0)
    converged = False
    x2 = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        b1, b2 = tangent_basis(g_hat)
        Bt = np.column_stack([b1, b2])
        A2 = np.column_stack([Ak[:, :3 * n], Ag @ Bt, Ak[:, 3 * n:]])
        b2_rhs = b - Ag @ (g_mag * g_hat)
        x2, *_ = np.linalg.lstsq(A2, b2_rhs, rcond=None)
        w = x2[3 * n:3 * n + 2]
        g_vec = g_mag * g_hat + Bt @ w
        g_hat = g_vec / np.linalg.norm(g_vec)
        if np.linalg.norm(w) < tol:
            converged = True
            break

    gravity = g_mag * g_hat
    vels = [x2[3 * k:3 * k + 3].copy() for k in range(n)]
    s = float(x2[-1])
    if s <= 0.0:
        raise InitializationError(f"refined scale {s:.6f} is not positive")
    x_full = np.concatenate([x2[:3 * n], gravity, [s]])
    res = float(np.linalg.norm(A @ x_full - b))
    sv = np.linalg.svd(A, compute_uv=False)
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    return AlignmentResult(vels, gravity, s, res, condition,
                           converged=converged, refine_iterations=iterations)


def world_frame_from_gravity(g_ref, q_b0_ref) -> np.ndarray:
    """Rotation from the reference camera frame to the world frame.

    Maps the measured gravity direction onto world +z (gravity here is the
    up-pointing static specific force) and removes the left-over heading
    freedom so the first body frame has zero yaw.
    """
    g_ref = np.asarray(g_ref, dtype=float)
    gn = np.linalg.norm(g_ref)
    if gn == 0.0:
        raise ValueError("gravity vector must be non-zero")
    g_hat = g_ref / gn
    ez = np.array([0.0, 0.0, 1.0])
    c = float(g_hat @ ez)
    if c > 1.0 - 1e-12:
        R0 = np.eye(3)
    elif c < -1.0 + 1e-12:
        R0 = np.diag([1.0, -1.0, -1.0])  # pi about x
    else:
        axis = np.cross(g_hat, ez)
        axis /= np.linalg.norm(axis)
        angle = np.arccos(c)
        K = skew(axis)
        R0 = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    yaw = yaw_of(R0 @ quat_to_rot(np.asarray(q_b0_ref, dtype=float)))
    return rot_z(-yaw) @ R0
