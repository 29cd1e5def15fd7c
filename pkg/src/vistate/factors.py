"""Residuals and analytic Jacobians for the two measurement factors.

IMU factor: 15 rows ordered (position, attitude, velocity, accel-bias,
gyro-bias) comparing the bias-corrected preintegrated increments against the
increments implied by the two frame states.  Vision factor: 2 rows comparing
a landmark, parameterized by inverse range along its first-observation
bearing, against a later observation, either on the unit-sphere tangent
plane (default) or on the normalized image plane.

Every attitude Jacobian is taken with respect to the right (body-frame)
quaternion update of :func:`vistate.quatmath.pose_boxplus`; all blocks are
validated against central finite differences in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignment import Extrinsics
from .preintegration import (
    A, B, BA, BG, TH,
    FrameState,
    PreintegrationDelta,
    bias_blocks,
    correct_for_bias,
)
from .quatmath import (
    left_qmat,
    quat_inv,
    quat_mul,
    quat_to_rot,
    right_qmat,
    skew,
    tangent_basis,
)

TANGENT = "tangent"
PLANE = "plane"


class BehindCameraError(RuntimeError):
    """Transformed landmark has non-positive depth in plane mode."""


@dataclass
class FeatureObs:
    """A single observation: frame id plus unit bearing in that camera."""
    frame_id: int
    bearing: np.ndarray

    def __post_init__(self):
        self.bearing = np.asarray(self.bearing, dtype=float)
        n = np.linalg.norm(self.bearing)
        if abs(n - 1.0) > 1e-9:
            self.bearing = self.bearing / n

    @staticmethod
    def from_uv(frame_id: int, u: float, v: float) -> "FeatureObs":
        vec = np.array([u, v, 1.0])
        return FeatureObs(frame_id, vec / np.linalg.norm(vec))

    def uv(self) -> np.ndarray:
        """Normalized image plane coordinates (u, v)."""
        return self.bearing[:2] / self.bearing[2]


@dataclass
class FeatureTrack:
    """Landmark track: anchored at its first observation with inverse range."""
    feature_id: int
    anchor_frame: int
    inv_depth: float
    observations: list

    def obs_for(self, frame_id: int) -> FeatureObs:
        for ob in self.observations:
            if ob.frame_id == frame_id:
                return ob
        raise KeyError(f"track {self.feature_id} has no observation in frame {frame_id}")

    @property
    def anchor_bearing(self) -> np.ndarray:
        return self.obs_for(self.anchor_frame).bearing


def sqrt_information(P: np.ndarray, floor_rel: float = 1e-12) -> np.ndarray:
    """Lower-triangular L with L^T L = P^{-1}.

    Eigenvalues of P below floor_rel * ||P|| are floored before inversion so
    that factors over near-empty intervals do not produce infinite weights.
    """
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    norm = float(w[-1])
    floor = max(floor_rel * norm, 1e-300)
    w = np.maximum(w, floor)
    info = (V / w) @ V.T
    info = 0.5 * (info + info.T)
    # UL-style Cholesky via the exchange trick keeps L lower-triangular
    n = info.shape[0]
    E = np.eye(n)[::-1]
    G = np.linalg.cholesky(E @ info @ E)
    return E @ G.T @ E


def whiten(residual: np.ndarray, jacobians, L: np.ndarray):
    """Scale residual and Jacobian blocks by the square-root information."""
    if not np.all(np.isfinite(L)):
        raise ValueError("square-root information contains non-finite entries")
    return L @ residual, [L @ Jb for Jb in jacobians]


def huber_weight(norm: float, threshold: float = 1.0) -> float:
    """IRLS scaling applied to whitened residual/Jacobians."""
    if threshold is None or norm <= threshold:
        return 1.0
    return math.sqrt(threshold / norm)


# ---------------------------------------------------------------------------
# IMU factor
# ---------------------------------------------------------------------------

class ImuFactor:
    """Binds a preintegrated delta to the two frame states it constrains."""

    def __init__(self, delta: PreintegrationDelta, dt: float, gravity,
                 sqrt_info: np.ndarray | None = None):
        if dt <= 0.0:
            raise ValueError("factor requires a positive time span")
        self.delta = delta
        self.dt = float(dt)
        self.gravity = np.asarray(gravity, dtype=float)
        self.sqrt_info = sqrt_info if sqrt_info is not None else sqrt_information(delta.P)


def _corrected(f: ImuFactor, sk: FrameState):
    # re-evaluate the first-order bias correction at the current estimate
    return correct_for_bias(f.delta, sk.ba, sk.bg, warn_threshold=np.inf)


def imu_residual(f: ImuFactor, sk: FrameState, sk1: FrameState) -> np.ndarray:
    alpha, beta, gamma = _corrected(f, sk)
    g = f.gravity
    dt = f.dt
    Rw = quat_to_rot(sk.q).T
    r = np.zeros(15)
    r[A] = Rw @ (sk1.p - sk.p - sk.v * dt + 0.5 * g * dt * dt) - alpha
    q_err = quat_mul(quat_inv(gamma), quat_mul(quat_inv(sk.q), sk1.q))
    if q_err[0] < 0.0:
        q_err = -q_err  # keep the small-angle branch, avoid 2*pi wraps
    r[TH] = 2.0 * q_err[1:4]
    r[B] = Rw @ (sk1.v - sk.v + g * dt) - beta
    r[BA] = sk1.ba - sk.ba
    r[BG] = sk1.bg - sk.bg
    return r


def imu_jacobians(f: ImuFactor, sk: FrameState, sk1: FrameState):
    """Blocks w.r.t. (p_k, q_k), (v_k, ba_k, bg_k), (p_k1, q_k1), (v_k1, ba_k1, bg_k1).

    Shapes 15x6, 15x9, 15x6, 15x9 in manifold coordinates.
    """
    alpha, beta, gamma = _corrected(f, sk)
    Jb = bias_blocks(f.delta)
    g = f.gravity
    dt = f.dt
    Rw = quat_to_rot(sk.q).T
    qk_inv_qk1 = quat_mul(quat_inv(sk.q), sk1.q)
    q_err = quat_mul(quat_inv(gamma), qk_inv_qk1)
    sign = -1.0 if q_err[0] < 0.0 else 1.0

    J0 = np.zeros((15, 6))
    J0[A, 0:3] = -Rw
    J0[A, 3:6] = skew(Rw @ (sk1.p - sk.p - sk.v * dt + 0.5 * g * dt * dt))
    J0[TH, 3:6] = -sign * (left_qmat(quat_inv(gamma))
                           @ right_qmat(qk_inv_qk1))[1:4, 1:4]
    J0[B, 3:6] = skew(Rw @ (sk1.v - sk.v + g * dt))

    J1 = np.zeros((15, 9))
    J1[A, 0:3] = -Rw * dt
    J1[A, 3:6] = -Jb["a_ba"]
    J1[A, 6:9] = -Jb["a_bg"]
    J1[TH, 6:9] = -sign * right_qmat(q_err)[1:4, 1:4] @ Jb["g_bg"]
    J1[B, 0:3] = -Rw
    J1[B, 3:6] = -Jb["b_ba"]
    J1[B, 6:9] = -Jb["b_bg"]
    J1[BA, 3:6] = -np.eye(3)
    J1[BG, 6:9] = -np.eye(3)

    J2 = np.zeros((15, 6))
    J2[A, 0:3] = Rw
    J2[TH, 3:6] = sign * left_qmat(q_err)[1:4, 1:4]

    J3 = np.zeros((15, 9))
    J3[B, 0:3] = Rw
    J3[BA, 3:6] = np.eye(3)
    J3[BG, 6:9] = np.eye(3)
    return [J0, J1, J2, J3]


# ---------------------------------------------------------------------------
# Vision factor
# ---------------------------------------------------------------------------

def transform_feature(track: FeatureTrack, si: FrameState, sj: FrameState,
                      ext: Extrinsics) -> np.ndarray:
    """Landmark coordinates in camera j: chains anchor camera -> anchor body
    -> world -> body j -> camera j.

    A non-positive third component means the landmark sits behind camera j;
    the tangent residual still works there, the plane residual refuses.
    """
    if si is sj:
        raise ValueError("anchor and observation states must differ")
    if track.inv_depth <= 0.0:
        raise ValueError("inverse depth must be positive")
    R_c_b = quat_to_rot(ext.q_c_b)
    anchor = track.anchor_bearing / track.inv_depth
    p_in_bi = R_c_b @ anchor + ext.p_c_b
    p_in_w = quat_to_rot(si.q) @ p_in_bi + si.p
    p_in_bj = quat_to_rot(sj.q).T @ (p_in_w - sj.p)
    return R_c_b.T @ (p_in_bj - ext.p_c_b)


def vision_residual(track: FeatureTrack, obs: FeatureObs, si: FrameState,
                    sj: FrameState, ext: Extrinsics, mode: str = TANGENT) -> np.ndarray:
    if obs.frame_id == track.anchor_frame:
        raise ValueError("a factor needs an observation away from the anchor")
    pt = transform_feature(track, si, sj, ext)
    return _reduce_residual(pt, obs, mode)


def _reduce_residual(pt: np.ndarray, obs: FeatureObs, mode: str) -> np.ndarray:
    if mode == TANGENT:
        b1, b2 = tangent_basis(obs.bearing)
        diff = pt / np.linalg.norm(pt) - obs.bearing
        return np.array([b1 @ diff, b2 @ diff])
    if mode == PLANE:
        if pt[2] <= 1e-6:
            raise BehindCameraError(f"depth {pt[2]:.3g} is not usable on the image plane")
        meas = obs.uv()
        return np.array([pt[0] / pt[2] - meas[0], pt[1] / pt[2] - meas[1]])
    raise ValueError(f"unknown residual mode {mode!r}")


def _reduction_jacobian(pt: np.ndarray, obs: FeatureObs, mode: str) -> np.ndarray:
    """2x3 derivative of the residual w.r.t. the camera-j point."""
    if mode == TANGENT:
        b1, b2 = tangent_basis(obs.bearing)
        n = np.linalg.norm(pt)
        d_unit = np.eye(3) / n - np.outer(pt, pt) / n ** 3
        return np.vstack([b1, b2]) @ d_unit
    if mode == PLANE:
        if pt[2] <= 1e-6:
            raise BehindCameraError(f"depth {pt[2]:.3g} is not usable on the image plane")
        x, y, z = pt
        return np.array([[1.0 / z, 0.0, -x / z ** 2],
                         [0.0, 1.0 / z, -y / z ** 2]])
    raise ValueError(f"unknown residual mode {mode!r}")


def vision_jacobians(track: FeatureTrack, obs: FeatureObs, si: FrameState,
                     sj: FrameState, ext: Extrinsics, mode: str = TANGENT):
    """Blocks w.r.t. (p_i, q_i), (p_j, q_j), extrinsics, inverse depth.

    Shapes 2x6, 2x6, 2x6, 2x1; each is the 2x3 reduction times the chain
    derivative of the camera-j point.
    """
    _, jacs = _vision_core(track.anchor_bearing, track.inv_depth,
                           quat_to_rot(si.q), si.p, quat_to_rot(sj.q).T, sj.p,
                           quat_to_rot(ext.q_c_b), ext.p_c_b,
                           _reduction_ctx(obs, mode), want_jac=True)
    return jacs


def _reduction_ctx(obs: FeatureObs, mode: str):
    """Precomputable per-observation pieces of the residual reduction."""
    if mode == TANGENT:
        b1, b2 = tangent_basis(obs.bearing)
        return (TANGENT, np.vstack([b1, b2]), obs.bearing)
    if mode == PLANE:
        return (PLANE, obs.uv())
    raise ValueError(f"unknown residual mode {mode!r}")


_ZERO_2x6 = np.zeros((2, 6))
_ZERO_2x6.setflags(write=False)


def _vision_core(bearing, inv_depth, Ri, p_i, Rjt, p_j, Rcb, pcb,
                 red_ctx, want_jac: bool, want_ext: bool = True):
    """Shared residual/Jacobian evaluation on precomputed rotations.

    want_ext=False skips the extrinsic block (a read-only zero placeholder
    is returned); used when the extrinsic pose is held fixed.
    """
    Rbc = Rcb.T
    anchor = bearing / inv_depth
    p_in_bi = Rcb @ anchor + pcb
    p_in_w = Ri @ p_in_bi + p_i
    p_in_bj = Rjt @ (p_in_w - p_j)
    pt = Rbc @ (p_in_bj - pcb)

    if red_ctx[0] == TANGENT:
        B, meas = red_ctx[1], red_ctx[2]
        n = math.sqrt(pt @ pt)
        r = B @ (pt / n - meas)
        if want_jac:
            Bpt = B @ pt
            red = B / n - np.outer(Bpt, pt) / n ** 3
    else:
        meas = red_ctx[1]
        z = pt[2]
        if z <= 1e-6:
            raise BehindCameraError(f"depth {z:.3g} is not usable on the image plane")
        r = np.array([pt[0] / z - meas[0], pt[1] / z - meas[1]])
        if want_jac:
            red = np.array([[1.0 / z, 0.0, -pt[0] / z ** 2],
                            [0.0, 1.0 / z, -pt[1] / z ** 2]])
    if not want_jac:
        return r, None

    RbcRjw = Rbc @ Rjt
    red_RR = red @ RbcRjw
    chain = red_RR @ Ri @ Rcb

    J0 = np.empty((2, 6))
    J0[:, 0:3] = red_RR
    J0[:, 3:6] = -(red_RR @ Ri) @ skew(p_in_bi)
    J1 = np.empty((2, 6))
    J1[:, 0:3] = -red_RR
    J1[:, 3:6] = (red @ Rbc) @ skew(p_in_bj)
    if want_ext:
        J2 = np.empty((2, 6))
        # extrinsic rotation: left perturbation of R_b_c plus right
        # perturbation of R_c_b
        J2[:, 0:3] = red_RR @ Ri - red @ Rbc
        J2[:, 3:6] = red @ skew(pt) - chain @ skew(anchor)
    else:
        J2 = _ZERO_2x6
    J3 = (chain @ bearing * (-1.0 / inv_depth ** 2)).reshape(2, 1)
    return r, [J0, J1, J2, J3]


# ---------------------------------------------------------------------------
# Solver-facing term adapters
# ---------------------------------------------------------------------------

def _state_from_blocks(blocks, pose_id, sb_id) -> FrameState:
    pv = blocks[pose_id].value
    sb = blocks[sb_id].value
    return FrameState(pv[0:3], pv[3:7], sb[0:3], sb[3:6], sb[6:9])


class ImuFactorTerm:
    """Whitened inertial constraint between two (pose, speed-bias) pairs."""

    def __init__(self, factor: ImuFactor, pose_i, sb_i, pose_j, sb_j):
        self.factor = factor
        self.block_ids = (pose_i, sb_i, pose_j, sb_j)

    def residual(self, blocks):
        sk = _state_from_blocks(blocks, self.block_ids[0], self.block_ids[1])
        sk1 = _state_from_blocks(blocks, self.block_ids[2], self.block_ids[3])
        return self.factor.sqrt_info @ imu_residual(self.factor, sk, sk1)

    def linearize(self, blocks):
        sk = _state_from_blocks(blocks, self.block_ids[0], self.block_ids[1])
        sk1 = _state_from_blocks(blocks, self.block_ids[2], self.block_ids[3])
        r = imu_residual(self.factor, sk, sk1)
        jacs = imu_jacobians(self.factor, sk, sk1)
        return whiten(r, jacs, self.factor.sqrt_info)

    def __repr__(self):
        return f"ImuFactorTerm({self.block_ids[0]}->{self.block_ids[2]})"


class VisionFactorTerm:
    """Whitened reprojection constraint of one track observation.

    Blocks: anchor pose, observing pose, extrinsic pose, inverse depth.
    The reduction context (tangent basis or plane coordinates) is frozen at
    construction since the measurement never changes.
    """

    def __init__(self, anchor_bearing, obs: FeatureObs, pose_i, pose_j,
                 ext_id, lm_id, sigma: float, mode: str = TANGENT,
                 huber: float | None = 1.0):
        self.anchor_bearing = np.asarray(anchor_bearing, dtype=float)
        self.obs = obs
        self.red_ctx = _reduction_ctx(obs, mode)
        self.block_ids = (pose_i, pose_j, ext_id, lm_id)
        self.inv_sigma = 1.0 / sigma
        self.mode = mode
        self.huber = huber

    def _eval(self, blocks, want_jac: bool):
        bi = blocks[self.block_ids[0]]
        bj = blocks[self.block_ids[1]]
        be = blocks[self.block_ids[2]]
        lam = blocks[self.block_ids[3]].value[0]
        return _vision_core(self.anchor_bearing, lam, bi.rot3(), bi.value[0:3],
                            bj.rot3().T, bj.value[0:3], be.rot3(),
                            be.value[0:3], self.red_ctx, want_jac,
                            want_ext=not be.fixed)

    def residual(self, blocks):
        r, _ = self._eval(blocks, want_jac=False)
        r = r * self.inv_sigma
        w = huber_weight(math.sqrt(r @ r), self.huber)
        return r * w

    def linearize(self, blocks):
        r, jacs = self._eval(blocks, want_jac=True)
        r = r * self.inv_sigma
        w = huber_weight(math.sqrt(r @ r), self.huber)
        scale = w * self.inv_sigma
        return r * w, [Jb * scale for Jb in jacs]

    def __repr__(self):
        return (f"VisionFactorTerm(track@{self.block_ids[3]}, "
                f"{self.block_ids[0]}->{self.block_ids[1]})")
