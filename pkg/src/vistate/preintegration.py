"""IMU preintegration between two keyframes with mid-point integration.

The accumulated delta consists of a position increment alpha (m), a velocity
increment beta (m/s) and an attitude increment gamma (unit quaternion), all
expressed in the body frame of the interval start.  Gravity is deliberately
absent from the integrals, so the delta depends only on the raw measurements
and the linearization biases; the start state and gravity are re-injected
when predicting (:func:`propagate_state`).

Alongside the delta we propagate a 15x15 covariance P and a 15x15 Jacobian J
of the final error state with respect to the initial one.  The error state is
ordered ``(d_alpha, d_theta, d_beta, d_ba, d_bg)``; the bias sub-blocks of J
drive the first-order bias correction (:func:`correct_for_bias`).

Sign convention for gravity: ``gravity`` vectors passed around this package
point *up* with magnitude ~9.81, matching the specific force a resting,
level accelerometer reads.  With that convention a static IMU is a fixed
point of :func:`propagate_state`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .quatmath import (
    IDENTITY_QUAT,
    omega_mat,
    quat_inv,
    quat_mul,
    quat_normalize,
    quat_to_rot,
    skew,
    so3_exp,
    so3_log,
)

MAX_DT_DEFAULT = 0.02

# rows/cols of the 15-dim error state
A = slice(0, 3)    # position increment error
TH = slice(3, 6)   # attitude error
B = slice(6, 9)    # velocity increment error
BA = slice(9, 12)  # accelerometer bias error
BG = slice(12, 15)  # gyroscope bias error


class ImuGapError(ValueError):
    """Gap between consecutive samples exceeds the configured maximum."""


@dataclass
class ImuSample:
    """One inertial measurement: time (s), angular rate (rad/s), specific force (m/s^2)."""
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class NoiseParams:
    """Continuous-time noise densities.

    sigma_a, sigma_g are white-noise densities (m/s^2/sqrt(Hz),
    rad/s/sqrt(Hz)); sigma_ba, sigma_bg are bias random-walk densities.
    Zeros are accepted so that noise-free propagation can be exercised.
    """
    sigma_a: float
    sigma_g: float
    sigma_ba: float
    sigma_bg: float

    def __post_init__(self):
        if min(self.sigma_a, self.sigma_g, self.sigma_ba, self.sigma_bg) < 0.0:
            raise ValueError("noise densities must be non-negative")


@dataclass
class FrameState:
    """World-frame navigation state attached to a keyframe."""
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.ba = np.asarray(self.ba, dtype=float)
        self.bg = np.asarray(self.bg, dtype=float)

    def copy(self) -> "FrameState":
        return FrameState(self.p.copy(), self.q.copy(), self.v.copy(),
                          self.ba.copy(), self.bg.copy())


@dataclass
class PreintegrationDelta:
    """Accumulated IMU increments plus covariance and bias Jacobian."""
    dt_total: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    lin_ba: np.ndarray
    lin_bg: np.ndarray
    P: np.ndarray
    J: np.ndarray


def preint_reset(lin_ba, lin_bg) -> PreintegrationDelta:
    """Fresh delta: zero increments, P = 0, J = I, biases frozen."""
    return PreintegrationDelta(
        dt_total=0.0,
        alpha=np.zeros(3),
        beta=np.zeros(3),
        gamma=IDENTITY_QUAT.copy(),
        lin_ba=np.asarray(lin_ba, dtype=float).copy(),
        lin_bg=np.asarray(lin_bg, dtype=float).copy(),
        P=np.zeros((15, 15)),
        J=np.eye(15),
    )


def preint_push(d: PreintegrationDelta, s0: ImuSample, s1: ImuSample,
                noise: NoiseParams, max_dt: float = MAX_DT_DEFAULT) -> PreintegrationDelta:
    """Advance the delta by one mid-point step over [s0.t, s1.t].

    The gyro mid-point uses the single linearization bias for both samples
    (biases are modelled constant across the interval).  The covariance
    update discretizes the white-noise channels as density^2 / dt so that
    continuous-time densities are honored; the random-walk channels pick up
    their dt through the noise-map entries.
    """
    dt = s1.t - s0.t
    if dt <= 0.0:
        raise ValueError(f"non-increasing sample timestamps: {s0.t} -> {s1.t}")
    if dt > max_dt:
        raise ImuGapError(f"sample gap {dt:.6f}s exceeds max_dt={max_dt}s")

    ba, bg = d.lin_ba, d.lin_bg
    w_mid = 0.5 * (s0.gyro + s1.gyro) - bg
    a0 = s0.accel - ba
    a1 = s1.accel - ba

    R0 = quat_to_rot(d.gamma)
    # exact exponential per step; the averaged rate is what makes it mid-point
    gamma1 = quat_mul(d.gamma, so3_exp(w_mid * dt))
    R1 = quat_to_rot(gamma1)

    acc0 = R0 @ a0
    acc1 = R1 @ a1
    acc_mid = 0.5 * (acc0 + acc1)
    beta1 = d.beta + acc_mid * dt
    alpha1 = d.alpha + d.beta * dt + 0.5 * acc_mid * dt * dt

    a0x = skew(a0)
    a1x = skew(a1)
    wx = skew(w_mid)
    I3 = np.eye(3)
    att = I3 - wx * dt                      # attitude transition block
    Ra1 = R1 @ a1x

    F = np.eye(15)
    F[A, TH] = -0.25 * dt * dt * (R0 @ a0x + Ra1 @ att)
    F[A, B] = I3 * dt
    F[A, BA] = -0.25 * dt * dt * (R0 + R1)
    F[A, BG] = 0.25 * dt ** 3 * Ra1
    F[TH, TH] = att
    F[TH, BG] = -I3 * dt
    F[B, TH] = -0.5 * dt * (R0 @ a0x + Ra1 @ att)
    F[B, BA] = -0.5 * dt * (R0 + R1)
    F[B, BG] = 0.5 * dt * dt * Ra1

    # noise map over (na_0, ng_0, na_1, ng_1, n_ba, n_bg)
    G = np.zeros((15, 18))
    G[A, 0:3] = -0.25 * dt * dt * R0
    G[A, 3:6] = 0.125 * dt ** 3 * Ra1
    G[A, 6:9] = -0.25 * dt * dt * R1
    G[A, 9:12] = G[A, 3:6]
    G[TH, 3:6] = -0.5 * dt * I3
    G[TH, 9:12] = -0.5 * dt * I3
    G[B, 0:3] = -0.5 * dt * R0
    G[B, 3:6] = 0.25 * dt * dt * Ra1
    G[B, 6:9] = -0.5 * dt * R1
    G[B, 9:12] = G[B, 3:6]
    G[BA, 12:15] = I3 * dt
    G[BG, 15:18] = I3 * dt

    qd = np.repeat([noise.sigma_a ** 2, noise.sigma_g ** 2,
                    noise.sigma_a ** 2, noise.sigma_g ** 2,
                    noise.sigma_ba ** 2, noise.sigma_bg ** 2], 3) / dt

    P1 = F @ d.P @ F.T + (G * qd) @ G.T
    P1 = 0.5 * (P1 + P1.T)
    J1 = F @ d.J

    return PreintegrationDelta(d.dt_total + dt, alpha1, beta1, gamma1,
                               ba.copy(), bg.copy(), P1, J1)


def _raw_step(gamma: np.ndarray, half_angle: np.ndarray) -> np.ndarray:
    # gamma * [1, half_angle] without the unit-norm checks of quat_mul
    w1, x1, y1, z1 = gamma
    x2, y2, z2 = half_angle
    return np.array([
        w1 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1,
    ])


def preint_batch(samples, lin_ba, lin_bg, noise: NoiseParams,
                 max_dt: float = MAX_DT_DEFAULT) -> PreintegrationDelta:
    """Fold preint_push over consecutive sample pairs."""
    if len(samples) < 2:
        raise ValueError("preintegration needs at least two samples")
    d = preint_reset(lin_ba, lin_bg)
    for s0, s1 in zip(samples[:-1], samples[1:]):
        d = preint_push(d, s0, s1, noise, max_dt)
    return d


def bias_blocks(d: PreintegrationDelta) -> dict[str, np.ndarray]:
    """Bias sub-blocks of J used by the first-order correction."""
    return {
        "a_ba": d.J[A, BA],
        "a_bg": d.J[A, BG],
        "g_bg": d.J[TH, BG],
        "b_ba": d.J[B, BA],
        "b_bg": d.J[B, BG],
    }


def correct_for_bias(d: PreintegrationDelta, new_ba, new_bg,
                     warn_threshold: float = 0.1):
    """First-order delta correction for biases that moved since linearization.

    Returns (alpha, beta, gamma) valid at the new biases.  Accuracy is
    second order in the bias change, which tests verify by comparing
    against full repropagation.
    """
    dba = np.asarray(new_ba, dtype=float) - d.lin_ba
    dbg = np.asarray(new_bg, dtype=float) - d.lin_bg
    step = max(np.linalg.norm(dba), np.linalg.norm(dbg))
    if step > warn_threshold:
        warnings.warn(f"bias change {step:.3g} exceeds the first-order "
                      f"correction trust region ({warn_threshold})",
                      stacklevel=2)
    Jb = bias_blocks(d)
    alpha = d.alpha + Jb["a_ba"] @ dba + Jb["a_bg"] @ dbg
    beta = d.beta + Jb["b_ba"] @ dba + Jb["b_bg"] @ dbg
    half = 0.5 * (Jb["g_bg"] @ dbg)
    gamma = quat_normalize(_raw_step(d.gamma, half))
    return alpha, beta, gamma


def continuous_ft_gt(R, accel, gyro, ba, bg):
    """Continuous-time error-state matrices F_t (15x15) and G_t (15x12).

    Rows and columns are ordered (d_alpha, d_beta, d_theta, d_ba, d_bg) --
    note the beta/theta swap relative to the discrete matrices; the
    comparison tests apply the fixed permutation.  Noise order is
    (n_a, n_g, n_ba, n_bg).
    """
    R = np.asarray(R, dtype=float)
    am = np.asarray(accel, dtype=float) - np.asarray(ba, dtype=float)
    wm = np.asarray(gyro, dtype=float) - np.asarray(bg, dtype=float)
    F = np.zeros((15, 15))
    F[0:3, 3:6] = np.eye(3)
    F[3:6, 6:9] = -R @ skew(am)
    F[3:6, 9:12] = -R
    F[6:9, 6:9] = -skew(wm)
    F[6:9, 12:15] = -np.eye(3)
    G = np.zeros((15, 12))
    G[3:6, 0:3] = -R
    G[6:9, 3:6] = -np.eye(3)
    G[9:12, 6:9] = np.eye(3)
    G[12:15, 9:12] = np.eye(3)
    return F, G


CONT_TO_DISC_PERM = np.r_[0:3, 6:9, 3:6, 9:12, 12:15]


def propagate_state(state: FrameState, d: PreintegrationDelta, gravity) -> FrameState:
    """Predict the state at the interval end from the start state and delta.

    Gravity (pointing up, see module docstring) is injected here; biases are
    carried over unchanged.
    """
    g = np.asarray(gravity, dtype=float)
    Rk = quat_to_rot(state.q)
    dt = d.dt_total
    p1 = state.p + state.v * dt - 0.5 * g * dt * dt + Rk @ d.alpha
    v1 = state.v - g * dt + Rk @ d.beta
    q1 = quat_mul(state.q, d.gamma)
    return FrameState(p1, q1, v1, state.ba.copy(), state.bg.copy())


def delta_from_states(s0: FrameState, s1: FrameState, dt: float, gravity):
    """Exact increments implied by two states over dt (the inverse of
    :func:`propagate_state`).  Used to synthesize perfectly consistent
    measurements from ground truth."""
    g = np.asarray(gravity, dtype=float)
    Rw = quat_to_rot(s0.q).T
    alpha = Rw @ (s1.p - s0.p - s0.v * dt + 0.5 * g * dt * dt)
    beta = Rw @ (s1.v - s0.v + g * dt)
    gamma = quat_mul(quat_inv(s0.q), s1.q)
    return alpha, beta, gamma


def reference_propagate(samples, state0: FrameState, gravity,
                        substeps: int = 10) -> FrameState:
    """World-frame RK4 integration of the navigation kinematics.

    Test oracle only: integrates position/velocity/attitude directly in the
    world frame at `substeps` sub-intervals per sample gap, interpolating
    the measurements linearly.  Independent of the mid-point delta path.
    """
    if len(samples) < 2:
        raise ValueError("propagation needs at least two samples")
    g = np.asarray(gravity, dtype=float)
    ba, bg = state0.ba, state0.bg
    p = state0.p.copy()
    v = state0.v.copy()
    q = state0.q.copy()

    def deriv(p_, v_, q_, accel, gyro):
        Rq = quat_to_rot(quat_normalize(q_))
        dp = v_
        dv = Rq @ (accel - ba) - g
        dq = 0.5 * omega_mat(gyro - bg) @ q_
        return dp, dv, dq

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        if dt <= 0.0:
            raise ValueError("non-increasing sample timestamps")
        h = dt / substeps
        for i in range(substeps):
            f0 = i / substeps
            f1 = (i + 0.5) / substeps
            f2 = (i + 1) / substeps
            a_0 = s0.accel * (1 - f0) + s1.accel * f0
            w_0 = s0.gyro * (1 - f0) + s1.gyro * f0
            a_h = s0.accel * (1 - f1) + s1.accel * f1
            w_h = s0.gyro * (1 - f1) + s1.gyro * f1
            a_1 = s0.accel * (1 - f2) + s1.accel * f2
            w_1 = s0.gyro * (1 - f2) + s1.gyro * f2

            k1 = deriv(p, v, q, a_0, w_0)
            k2 = deriv(p + 0.5 * h * k1[0], v + 0.5 * h * k1[1], q + 0.5 * h * k1[2], a_h, w_h)
            k3 = deriv(p + 0.5 * h * k2[0], v + 0.5 * h * k2[1], q + 0.5 * h * k2[2], a_h, w_h)
            k4 = deriv(p + h * k3[0], v + h * k3[1], q + h * k3[2], a_1, w_1)

            p = p + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            v = v + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            q = quat_normalize(q + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))

    return FrameState(p, q, v, ba.copy(), bg.copy())


def attitude_error(q_a, q_b) -> np.ndarray:
    """Rotation vector taking q_a to q_b (body frame)."""
    return so3_log(quat_mul(quat_inv(q_a), q_b))
