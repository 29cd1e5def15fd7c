"""Deterministic synthetic data generation.

Analytic trajectories provide exact position, velocity, acceleration,
attitude and body angular rate at any time.  From those we synthesize IMU
samples, normalized feature observations, up-to-scale camera poses and GPS
fixes, each with its own seeded noise stream so that toggling one sensor's
noise never perturbs another's draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .preintegration import FrameState, ImuSample
from .quatmath import (
    quat_mul,
    quat_normalize,
    quat_to_rot,
    rot_to_quat,
    rot_z,
    skew,
    so3_exp,
)


@dataclass
class TrajectorySpec:
    """Analytic trajectory description.

    kind: "circle" | "figure-eight" | "sinusoid-6dof"
    circle:        radius (m), period (s), z0 (m)
    figure-eight:  amp_x, amp_y (m), period (s), z0 (m)
    sinusoid-6dof: amp_pos (m, 3), freq_pos (Hz, 3), phase_pos (rad, 3),
                   amp_rot (rad, 3), freq_rot (Hz, 3), phase_rot (rad, 3)
    """
    kind: str = "circle"
    duration: float = 30.0
    radius: float = 5.0
    period: float = 10.0
    z0: float = 1.0
    amp_x: float = 6.0
    amp_y: float = 3.0
    amp_pos: tuple = (1.0, 0.8, 0.5)
    freq_pos: tuple = (0.4, 0.3, 0.5)
    phase_pos: tuple = (0.0, 1.2, 2.1)
    amp_rot: tuple = (0.25, 0.2, 0.3)
    freq_rot: tuple = (0.5, 0.4, 0.35)
    phase_rot: tuple = (0.4, 1.7, 0.9)


def _right_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3)
            - (1.0 - math.cos(theta)) / theta ** 2 * K
            + (theta - math.sin(theta)) / theta ** 3 * (K @ K))


class Trajectory:
    """Evaluates one TrajectorySpec; validates its own derivatives on build."""

    def __init__(self, spec: TrajectorySpec):
        if spec.kind not in ("circle", "figure-eight", "sinusoid-6dof"):
            raise ValueError(f"unknown trajectory kind {spec.kind!r}")
        self.spec = spec
        self._self_check()

    # -- analytic pieces ---------------------------------------------------
    def _pva(self, t: float):
        s = self.spec
        if s.kind == "circle":
            w = 2.0 * math.pi / s.period
            c, sn = math.cos(w * t), math.sin(w * t)
            p = np.array([s.radius * c, s.radius * sn, s.z0])
            v = np.array([-s.radius * w * sn, s.radius * w * c, 0.0])
            a = np.array([-s.radius * w * w * c, -s.radius * w * w * sn, 0.0])
        elif s.kind == "figure-eight":
            w = 2.0 * math.pi / s.period
            p = np.array([s.amp_x * math.sin(w * t),
                          0.5 * s.amp_y * math.sin(2.0 * w * t), s.z0])
            v = np.array([s.amp_x * w * math.cos(w * t),
                          s.amp_y * w * math.cos(2.0 * w * t), 0.0])
            a = np.array([-s.amp_x * w * w * math.sin(w * t),
                          -2.0 * s.amp_y * w * w * math.sin(2.0 * w * t), 0.0])
        else:
            amp = np.asarray(s.amp_pos)
            om = 2.0 * math.pi * np.asarray(s.freq_pos)
            ph = np.asarray(s.phase_pos)
            arg = om * t + ph
            p = amp * np.sin(arg)
            v = amp * om * np.cos(arg)
            a = -amp * om * om * np.sin(arg)
        return p, v, a

    def _attitude(self, t: float):
        s = self.spec
        if s.kind in ("circle", "figure-eight"):
            # yaw tracks the velocity direction; planar motion keeps roll/pitch zero
            _, v, a = self._pva(t)
            yaw = math.atan2(v[1], v[0])
            sp2 = v[0] * v[0] + v[1] * v[1]
            yaw_rate = (v[0] * a[1] - v[1] * a[0]) / sp2
            q = np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])
            w_body = np.array([0.0, 0.0, yaw_rate])
            return q, w_body
        amp = np.asarray(s.amp_rot)
        om = 2.0 * math.pi * np.asarray(s.freq_rot)
        ph = np.asarray(s.phase_rot)
        arg = om * t + ph
        phi = amp * np.sin(arg)
        phi_dot = amp * om * np.cos(arg)
        q = so3_exp(phi)
        w_body = _right_jacobian(phi) @ phi_dot
        return q, w_body

    def state(self, t: float):
        """Return (p, q, v, a, w_body) at time t."""
        if t < -1e-9 or t > self.spec.duration + 1e-9:
            raise ValueError(f"t={t} outside [0, {self.spec.duration}]")
        p, v, a = self._pva(t)
        q, w = self._attitude(t)
        return p, q, v, a, w

    def frame_state(self, t: float) -> FrameState:
        p, q, v, _, _ = self.state(t)
        return FrameState(p, q, v)

    def _self_check(self):
        h = 1e-5
        for t in np.linspace(2 * h, self.spec.duration - 2 * h, 7):
            p0, v0, a0 = self._pva(t - h)
            p, v, a = self._pva(t)
            p1, v1, a1 = self._pva(t + h)
            if np.max(np.abs((p1 - p0) / (2 * h) - v)) > 1e-5:
                raise AssertionError("trajectory velocity inconsistent with position")
            if np.max(np.abs((v1 - v0) / (2 * h) - a)) > 1e-4:
                raise AssertionError("trajectory acceleration inconsistent with velocity")
            q0, _ = self._attitude(t - h)
            q, w = self._attitude(t)
            q1, _ = self._attitude(t + h)
            # q and -q are one rotation; align signs across heading wraps
            if q0 @ q < 0.0:
                q0 = -q0
            if q1 @ q < 0.0:
                q1 = -q1
            dq = (q1 - q0) / (2 * h)
            w_fd = 2.0 * (np.array([
                -q[1] * dq[0] + q[0] * dq[1] + q[3] * dq[2] - q[2] * dq[3],
                -q[2] * dq[0] - q[3] * dq[1] + q[0] * dq[2] + q[1] * dq[3],
                -q[3] * dq[0] + q[2] * dq[1] - q[1] * dq[2] + q[0] * dq[3],
            ]))
            if np.max(np.abs(w_fd - w)) > 1e-4:
                raise AssertionError("trajectory angular rate inconsistent with attitude")


@dataclass
class SimConfig:
    """Everything a dataset generation run needs."""
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    gps_rate: float = 1.0
    n_landmarks: int = 150
    landmark_box: tuple = ((-14.0, -14.0, -2.0), (14.0, 14.0, 4.5))
    sigma_a: float = 0.0          # accel white density, m/s^2/sqrt(Hz)
    sigma_g: float = 0.0          # gyro white density, rad/s/sqrt(Hz)
    sigma_ba: float = 0.0         # random-walk densities, kept for manifests
    sigma_bg: float = 0.0
    feature_sigma_px: float = 0.0  # pixel-equivalent feature noise
    nominal_focal: float = 460.0
    gps_sigma: tuple = (0.5, 0.5, 0.5)
    bias_a: tuple = (0.0, 0.0, 0.0)   # constant true biases
    bias_g: tuple = (0.0, 0.0, 0.0)
    p_c_b: tuple = (0.08, 0.02, -0.03)
    q_c_b: tuple | None = None        # default: camera z looks along body +x
    g_mag: float = 9.81
    fov_deg: float = 120.0
    min_depth: float = 0.4
    sfm_scale: float = 2.5
    seed: int = 0
    gps_geodetic: bool = False
    gps_origin: tuple = (22.30, 114.17, 15.0)

    def __post_init__(self):
        if self.imu_rate <= 0 or self.cam_rate <= 0 or self.gps_rate <= 0:
            raise ValueError("sensor rates must be positive")
        if self.imu_rate < 2.0 * self.cam_rate:
            raise ValueError("imu_rate must be at least twice cam_rate")
        if self.q_c_b is None:
            # camera: optical axis = body +x, image x = body -y, image y = body -z
            R_c_b = np.array([[0.0, 0.0, 1.0],
                              [-1.0, 0.0, 0.0],
                              [0.0, -1.0, 0.0]])
            self.q_c_b = tuple(rot_to_quat(R_c_b))

    @property
    def gravity_w(self) -> np.ndarray:
        # points up: the world-frame specific force of a resting IMU
        return np.array([0.0, 0.0, self.g_mag])


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ["landmarks", "accel", "gyro", "features", "gps"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def sample_truth(traj: Trajectory, t: float):
    """(p, q, v, a, w_body) of the trajectory at t."""
    return traj.state(t)


def imu_times(cfg: SimConfig) -> np.ndarray:
    n = int(round(cfg.trajectory.duration * cfg.imu_rate))
    return np.arange(n + 1) / cfg.imu_rate


def frame_times(cfg: SimConfig) -> np.ndarray:
    n = int(round(cfg.trajectory.duration * cfg.cam_rate))
    return np.arange(n + 1) / cfg.cam_rate


def gen_imu(traj: Trajectory, cfg: SimConfig) -> list[ImuSample]:
    """Synthesize IMU samples by inverting the sensor model at each tick.

    The accelerometer reads specific force: body-frame true acceleration
    minus (down-pointing) gravity, so a static level unit reads
    (0, 0, +g_mag).
    """
    rng_a = _streams(cfg.seed)["accel"]
    rng_g = _streams(cfg.seed)["gyro"]
    g_up = cfg.gravity_w
    ba = np.asarray(cfg.bias_a)
    bg = np.asarray(cfg.bias_g)
    times = imu_times(cfg)
    # white noise std per sample = density * sqrt(rate)
    sa = cfg.sigma_a * math.sqrt(cfg.imu_rate)
    sg = cfg.sigma_g * math.sqrt(cfg.imu_rate)
    na = rng_a.standard_normal((len(times), 3)) * sa
    ng = rng_g.standard_normal((len(times), 3)) * sg
    out = []
    for i, t in enumerate(times):
        p, q, v, a, w = traj.state(t)
        Rwb = quat_to_rot(q).T
        accel = Rwb @ (a + g_up) + ba + na[i]
        gyro = w + bg + ng[i]
        out.append(ImuSample(float(t), gyro, accel))
    return out


def gen_landmarks(cfg: SimConfig) -> np.ndarray:
    rng = _streams(cfg.seed)["landmarks"]
    lo = np.asarray(cfg.landmark_box[0], dtype=float)
    hi = np.asarray(cfg.landmark_box[1], dtype=float)
    return lo + rng.random((cfg.n_landmarks, 3)) * (hi - lo)


def camera_pose(traj: Trajectory, cfg: SimConfig, t: float):
    """World-frame camera rotation matrix and position at t."""
    p, q, _, _, _ = traj.state(t)
    R_b_w = quat_to_rot(q)
    R_c_w = R_b_w @ quat_to_rot(np.asarray(cfg.q_c_b))
    p_c_w = p + R_b_w @ np.asarray(cfg.p_c_b)
    return R_c_w, p_c_w


def gen_features(traj: Trajectory, cfg: SimConfig, landmarks: np.ndarray):
    """Project landmarks at each camera epoch.

    Returns (observations, true_inv_depths) where observations is a list of
    (t, frame_id, feature_id, u, v) with (u, v) on the normalized image
    plane, and true_inv_depths maps (frame_id, feature_id) to the inverse
    range used for test oracles.
    """
    rng = _streams(cfg.seed)["features"]
    times = frame_times(cfg)
    cos_half_fov = math.cos(math.radians(cfg.fov_deg) / 2.0)
    sigma_uv = cfg.feature_sigma_px / cfg.nominal_focal
    noise = rng.standard_normal((len(times), len(landmarks), 2)) * sigma_uv
    obs = []
    inv_depths = {}
    for k, t in enumerate(times):
        R_c_w, p_c_w = camera_pose(traj, cfg, t)
        pts = (landmarks - p_c_w) @ R_c_w  # world -> camera for every landmark
        rng_norm = np.linalg.norm(pts, axis=1)
        visible = (pts[:, 2] > cfg.min_depth) & (pts[:, 2] / np.maximum(rng_norm, 1e-12) > cos_half_fov)
        for lid in np.nonzero(visible)[0]:
            x, y, z = pts[lid]
            u = x / z + noise[k, lid, 0]
            v = y / z + noise[k, lid, 1]
            obs.append((float(t), int(k), int(lid), float(u), float(v)))
            inv_depths[(int(k), int(lid))] = 1.0 / rng_norm[lid]
    return obs, inv_depths


def gen_gps(traj: Trajectory, cfg: SimConfig):
    """Truth positions at gps_rate plus Gaussian noise; boundary inclusive."""
    rng = _streams(cfg.seed)["gps"]
    n = int(math.floor(cfg.trajectory.duration * cfg.gps_rate + 1e-9))
    times = np.arange(n + 1) / cfg.gps_rate
    std = np.asarray(cfg.gps_sigma, dtype=float)
    noise = rng.standard_normal((len(times), 3)) * std
    fixes = []
    for i, t in enumerate(times):
        p, _, _, _, _ = traj.state(t)
        fixes.append((float(t), p + noise[i], std.copy()))
    return fixes


def gen_sfm_poses(traj: Trajectory, cfg: SimConfig):
    """Idealized up-to-scale camera poses relative to the first frame.

    True camera poses are expressed in the first camera frame and their
    translations divided by sfm_scale, mimicking a monocular reconstruction
    whose global scale is unknown.
    """
    times = frame_times(cfg)
    R0, p0 = camera_pose(traj, cfg, times[0])
    out = []
    for k, t in enumerate(times):
        Rk, pk = camera_pose(traj, cfg, t)
        q_rel = rot_to_quat(R0.T @ Rk)
        p_rel = R0.T @ (pk - p0) / cfg.sfm_scale
        out.append((int(k), float(t), q_rel, p_rel))
    return out


def true_bearing(traj: Trajectory, cfg: SimConfig, t: float, landmark) -> np.ndarray:
    """Unit bearing of a landmark in the camera at time t (no noise)."""
    R_c_w, p_c_w = camera_pose(traj, cfg, t)
    pc = R_c_w.T @ (np.asarray(landmark) - p_c_w)
    return pc / np.linalg.norm(pc)


def make_circle_config(duration: float = 30.0, seed: int = 0, **kw) -> SimConfig:
    """The standard desk-scale circle dataset used by the acceptance runs."""
    spec = TrajectorySpec(kind="circle", duration=duration, radius=5.0,
                          period=10.0, z0=1.0)
    return SimConfig(trajectory=spec, seed=seed, **kw)
