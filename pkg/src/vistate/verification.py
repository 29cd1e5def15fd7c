"""Finite-difference gates for the analytic factor Jacobians.

Each gate draws random factor/state configurations, perturbs every input
block through the same manifold update the solver uses, and compares the
analytic Jacobian entries against central differences.  An entry passes when
|analytic - numeric| <= max(1e-5, 1e-4 * |analytic|).
"""
from __future__ import annotations

import numpy as np

from .alignment import Extrinsics
from .factors import (
    PLANE,
    TANGENT,
    FeatureObs,
    FeatureTrack,
    ImuFactor,
    imu_jacobians,
    imu_residual,
    transform_feature,
    vision_jacobians,
    vision_residual,
)
from .preintegration import (
    FrameState,
    ImuSample,
    NoiseParams,
    preint_batch,
    propagate_state,
)
from .quatmath import pose_boxplus, so3_exp

FD_STEP = 1e-6
ABS_TOL = 1e-5
REL_TOL = 1e-4


def _gate(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst violation ratio; <= 1 passes."""
    tol = np.maximum(ABS_TOL, REL_TOL * np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / tol))


def _perturb_state(s: FrameState, which: str, delta: np.ndarray) -> FrameState:
    out = s.copy()
    if which == "pose":
        out.p = s.p + delta[0:3]
        out.q = pose_boxplus(s.q, delta[3:6])
    else:
        out.v = s.v + delta[0:3]
        out.ba = s.ba + delta[3:6]
        out.bg = s.bg + delta[6:9]
    return out


def _fd_block(fun, dim: int, h: float = FD_STEP) -> np.ndarray:
    cols = []
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        rp = fun(e)
        e[k] = -h
        rm = fun(e)
        cols.append((rp - rm) / (2.0 * h))
    return np.column_stack(cols)


def _random_imu_case(rng: np.random.Generator):
    n = 12
    dt = 0.005
    bias_a = rng.normal(0.0, 0.02, 3)
    bias_g = rng.normal(0.0, 0.005, 3)
    samples = []
    base_a = np.array([0.0, 0.0, 9.81]) + rng.normal(0.0, 1.0, 3)
    base_w = rng.normal(0.0, 0.5, 3)
    for i in range(n):
        t = i * dt
        accel = base_a + 0.5 * np.sin(3.0 * t + rng.normal()) * rng.normal(0.0, 1.0, 3)
        gyro = base_w + 0.3 * np.sin(4.0 * t + rng.normal()) * rng.normal(0.0, 1.0, 3)
        samples.append(ImuSample(t, gyro, accel))
    noise = NoiseParams(2e-2, 2e-3, 1e-4, 1e-4)
    delta = preint_batch(samples, bias_a, bias_g, noise)
    gravity = np.array([0.0, 0.0, 9.81])
    factor = ImuFactor(delta, delta.dt_total, gravity, sqrt_info=np.eye(15))

    sk = FrameState(rng.normal(0.0, 3.0, 3), so3_exp(rng.normal(0.0, 0.8, 3)),
                    rng.normal(0.0, 1.0, 3),
                    bias_a + rng.normal(0.0, 1e-3, 3),
                    bias_g + rng.normal(0.0, 1e-3, 3))
    sk1 = propagate_state(sk, delta, gravity)
    # move the end state a little so the residual is non-trivial
    sk1.p += rng.normal(0.0, 5e-3, 3)
    sk1.q = pose_boxplus(sk1.q, rng.normal(0.0, 5e-3, 3))
    sk1.v += rng.normal(0.0, 5e-3, 3)
    sk1.ba = sk.ba + rng.normal(0.0, 1e-4, 3)
    sk1.bg = sk.bg + rng.normal(0.0, 1e-4, 3)
    return factor, sk, sk1


IMU_BLOCKS = [
    ("imu-J0-position", 0, "pose", slice(0, 3)),
    ("imu-J0-attitude", 0, "pose", slice(3, 6)),
    ("imu-J1-velocity", 1, "sb", slice(0, 3)),
    ("imu-J1-accel-bias", 1, "sb", slice(3, 6)),
    ("imu-J1-gyro-bias", 1, "sb", slice(6, 9)),
    ("imu-J2-position", 2, "pose", slice(0, 3)),
    ("imu-J2-attitude", 2, "pose", slice(3, 6)),
    ("imu-J3-velocity", 3, "sb", slice(0, 3)),
    ("imu-J3-accel-bias", 3, "sb", slice(3, 6)),
    ("imu-J3-gyro-bias", 3, "sb", slice(6, 9)),
]


def check_imu_jacobians(trials: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name, *_ in IMU_BLOCKS}
    for _ in range(trials):
        factor, sk, sk1 = _random_imu_case(rng)
        jacs = imu_jacobians(factor, sk, sk1)

        def res(which_state, which_part, delta):
            a, b = sk, sk1
            if which_state == 0:
                a = _perturb_state(sk, which_part, delta)
            else:
                b = _perturb_state(sk1, which_part, delta)
            return imu_residual(factor, a, b)

        fd = [
            _fd_block(lambda d: res(0, "pose", d), 6),
            _fd_block(lambda d: res(0, "sb", d), 9),
            _fd_block(lambda d: res(1, "pose", d), 6),
            _fd_block(lambda d: res(1, "sb", d), 9),
        ]
        for name, bi, _, cols in IMU_BLOCKS:
            ratio = _gate(jacs[bi][:, cols], fd[bi][:, cols])
            worst[name] = max(worst[name], ratio)
    return worst


def _random_vision_case(rng: np.random.Generator):
    while True:
        si = FrameState(rng.normal(0.0, 2.0, 3), so3_exp(rng.normal(0.0, 0.6, 3)),
                        np.zeros(3))
        sj = FrameState(si.p + rng.normal(0.0, 0.5, 3),
                        pose_boxplus(si.q, rng.normal(0.0, 0.15, 3)),
                        np.zeros(3))
        ext = Extrinsics(rng.normal(0.0, 0.05, 3), so3_exp(rng.normal(0.0, 0.4, 3)))
        bearing = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 1.0])
        bearing /= np.linalg.norm(bearing)
        depth = rng.uniform(2.0, 12.0)
        track = FeatureTrack(0, 0, 1.0 / depth,
                             [FeatureObs(0, bearing)])
        pt = transform_feature(track, si, sj, ext)
        if pt[2] < 0.5:
            continue
        unit = pt / np.linalg.norm(pt)
        # observation near (not exactly at) the projection
        noisy = unit + rng.normal(0.0, 2e-3, 3)
        obs = FeatureObs(1, noisy / np.linalg.norm(noisy))
        return track, obs, si, sj, ext


VISION_BLOCKS = [
    ("J0-anchor-position", 0, slice(0, 3)),
    ("J0-anchor-attitude", 0, slice(3, 6)),
    ("J1-observer-position", 1, slice(0, 3)),
    ("J1-observer-attitude", 1, slice(3, 6)),
    ("J2-extrinsic-position", 2, slice(0, 3)),
    ("J2-extrinsic-attitude", 2, slice(3, 6)),
    ("J3-inverse-depth", 3, slice(0, 1)),
]


def check_vision_jacobians(trials: int = 100, seed: int = 0,
                           mode: str = TANGENT) -> dict:
    rng = np.random.default_rng(seed)
    prefix = f"vision-{mode}-"
    worst = {prefix + name: 0.0 for name, *_ in VISION_BLOCKS}
    for _ in range(trials):
        track, obs, si, sj, ext = _random_vision_case(rng)
        jacs = vision_jacobians(track, obs, si, sj, ext, mode)

        def res_pose(which, delta):
            a, b = si, sj
            if which == 0:
                a = _perturb_state(si, "pose", delta)
            else:
                b = _perturb_state(sj, "pose", delta)
            return vision_residual(track, obs, a, b, ext, mode)

        def res_ext(delta):
            e = Extrinsics(ext.p_c_b + delta[0:3],
                           pose_boxplus(ext.q_c_b, delta[3:6]))
            return vision_residual(track, obs, si, sj, e, mode)

        def res_lam(delta):
            tr = FeatureTrack(track.feature_id, track.anchor_frame,
                              track.inv_depth + delta[0], track.observations)
            return vision_residual(tr, obs, si, sj, ext, mode)

        fd = [
            _fd_block(lambda d: res_pose(0, d), 6),
            _fd_block(lambda d: res_pose(1, d), 6),
            _fd_block(res_ext, 6),
            _fd_block(res_lam, 1),
        ]
        for name, bi, cols in VISION_BLOCKS:
            ratio = _gate(jacs[bi][:, cols], fd[bi][:, cols])
            worst[prefix + name] = max(worst[prefix + name], ratio)
    return worst


def run_all_gates(trials: int = 100, seed: int = 0) -> tuple[dict, bool]:
    """All factor gates; returns ({block: worst_ratio}, all_passed)."""
    table = {}
    table.update(check_imu_jacobians(trials, seed))
    table.update(check_vision_jacobians(trials, seed, TANGENT))
    table.update(check_vision_jacobians(trials, seed + 1, PLANE))
    return table, all(v <= 1.0 for v in table.values())
