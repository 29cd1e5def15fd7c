"""Pose-graph fusion of local odometry with GPS.

Consecutive local poses contribute relative-pose edges with fixed standard
deviations (0.1 m position, 0.01 rad rotation); GPS fixes contribute
per-axis-whitened position factors with a Huber loss.  Optimizing the graph
yields globally referenced poses plus the local-to-global transform, either
from the last node alone or from a fit over all nodes (default).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .quatmath import (
    Pose,
    left_qmat,
    pose_compose,
    pose_inverse,
    quat_canonical,
    quat_inv,
    quat_mul,
    quat_to_rot,
    right_qmat,
    rot_to_quat,
    skew,
)
from .solver import GLOBAL_POSE, OptimizeConfig, ParamBlock, optimize

logger = logging.getLogger(__name__)

EDGE_POS_STD = 0.1    # m, fixed for local odometry edges
EDGE_ROT_STD = 0.01   # rad

# WGS-84
_WGS84_A = 6378137.0
_WGS84_F = 1.0 / 298.257223563
_WGS84_E2 = _WGS84_F * (2.0 - _WGS84_F)


class GaugeError(RuntimeError):
    """The graph has no GPS constraint, so its gauge is unfixed."""


@dataclass
class GpsFix:
    t: float
    p: np.ndarray       # ENU, m
    std: np.ndarray     # per-axis, m

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(self.std <= 0.0):
            raise ValueError("GPS standard deviations must be positive")


# ---------------------------------------------------------------------------
# geodetic conversions
# ---------------------------------------------------------------------------

def _lla_to_ecef(lat, lon, alt):
    phi, lam = math.radians(lat), math.radians(lon)
    sp, cp = math.sin(phi), math.cos(phi)
    n = _WGS84_A / math.sqrt(1.0 - _WGS84_E2 * sp * sp)
    return np.array([(n + alt) * cp * math.cos(lam),
                     (n + alt) * cp * math.sin(lam),
                     (n * (1.0 - _WGS84_E2) + alt) * sp])


def _enu_rotation(lat, lon):
    phi, lam = math.radians(lat), math.radians(lon)
    sp, cp = math.sin(phi), math.cos(phi)
    sl, cl = math.sin(lam), math.cos(lam)
    return np.array([[-sl, cl, 0.0],
                     [-sp * cl, -sp * sl, cp],
                     [cp * cl, cp * sl, sp]])


def lla_to_enu(lat, lon, alt, origin) -> np.ndarray:
    """Geodetic point -> local East-North-Up about the origin fix."""
    e0 = _lla_to_ecef(*origin)
    return _enu_rotation(origin[0], origin[1]) @ (_lla_to_ecef(lat, lon, alt) - e0)


def enu_to_lla(enu, origin):
    """Inverse of lla_to_enu (Bowring-style iteration on the latitude)."""
    ecef = _lla_to_ecef(*origin) + _enu_rotation(origin[0], origin[1]).T @ np.asarray(enu, dtype=float)
    x, y, z = ecef
    lon = math.atan2(y, x)
    r = math.hypot(x, y)
    lat = math.atan2(z, r * (1.0 - _WGS84_E2))
    for _ in range(6):
        sp = math.sin(lat)
        n = _WGS84_A / math.sqrt(1.0 - _WGS84_E2 * sp * sp)
        alt = r / math.cos(lat) - n
        lat = math.atan2(z, r * (1.0 - _WGS84_E2 * n / (n + alt)))
    sp = math.sin(lat)
    n = _WGS84_A / math.sqrt(1.0 - _WGS84_E2 * sp * sp)
    alt = r / math.cos(lat) - n
    return math.degrees(lat), math.degrees(lon), alt


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform of b expressed in a's frame."""
    return pose_compose(pose_inverse(a), b)


def vio_edge_residual(rel_local: Pose, node_i: Pose, node_j: Pose,
                      pos_std: float = EDGE_POS_STD, rot_std: float = EDGE_ROT_STD):
    """Whitened 6-vector (position, attitude) plus Jacobians w.r.t. both nodes.

    The residual compares the node-implied relative transform against the
    fixed local-odometry one; Jacobians follow the body-frame right update.
    """
    Ri_t = quat_to_rot(node_i.q).T
    dp_global = Ri_t @ (node_j.t - node_i.t)
    q_ij_global = quat_mul(quat_inv(node_i.q), node_j.q)
    q_err = quat_mul(quat_inv(rel_local.q), q_ij_global)
    sign = -1.0 if q_err[0] < 0.0 else 1.0
    q_err = sign * q_err
    r = np.zeros(6)
    r[0:3] = (dp_global - rel_local.t) / pos_std
    r[3:6] = 2.0 * q_err[1:4] / rot_std

    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[0:3, 0:3] = -Ri_t / pos_std
    Ji[0:3, 3:6] = skew(dp_global) / pos_std
    Ji[3:6, 3:6] = -sign * (left_qmat(quat_inv(rel_local.q))
                            @ right_qmat(q_ij_global))[1:4, 1:4] / rot_std
    Jj[0:3, 0:3] = Ri_t / pos_std
    Jj[3:6, 3:6] = sign * left_qmat(q_err)[1:4, 1:4] / rot_std
    return r, Ji, Jj


def gps_residual(fix: GpsFix, node: Pose):
    """Per-axis whitened position difference plus its Jacobian."""
    r = (node.t - fix.p) / fix.std
    J = np.zeros((3, 6))
    J[0:3, 0:3] = np.diag(1.0 / fix.std)
    return r, J


class VioEdgeTerm:
    def __init__(self, bid_i, bid_j, rel_local: Pose,
                 pos_std: float = EDGE_POS_STD, rot_std: float = EDGE_ROT_STD):
        self.block_ids = (bid_i, bid_j)
        self.rel = rel_local
        self.pos_std = pos_std
        self.rot_std = rot_std

    def linearize(self, blocks):
        vi = blocks[self.block_ids[0]].value
        vj = blocks[self.block_ids[1]].value
        r, Ji, Jj = vio_edge_residual(self.rel, Pose(vi[3:7], vi[0:3]),
                                      Pose(vj[3:7], vj[0:3]),
                                      self.pos_std, self.rot_std)
        return r, [Ji, Jj]


class GpsTerm:
    def __init__(self, bid, fix: GpsFix, huber: float | None = 1.0):
        self.block_ids = (bid,)
        self.fix = fix
        self.huber = huber

    def linearize(self, blocks):
        v = blocks[self.block_ids[0]].value
        r, J = gps_residual(self.fix, Pose(v[3:7], v[0:3]))
        if self.huber is not None:
            n = float(np.linalg.norm(r))
            if n > self.huber:
                w = math.sqrt(self.huber / n)
                r = r * w
                J = J * w
        return r, [J]


# ---------------------------------------------------------------------------
# graph assembly and the local-to-global transform
# ---------------------------------------------------------------------------

def associate_fixes(node_times, fixes: list[GpsFix], tol: float = 0.01):
    """Nearest-timestamp matching within tol seconds; returns matches and
    the number of fixes dropped."""
    times = np.asarray(node_times, dtype=float)
    matches = []
    dropped = 0
    for fix in fixes:
        idx = int(np.argmin(np.abs(times - fix.t)))
        if abs(times[idx] - fix.t) <= tol:
            matches.append((idx, fix))
        else:
            dropped += 1
    return matches, dropped


def mean_rigid_transform(local_poses: list[Pose], global_poses: list[Pose]) -> Pose:
    """Average T_l^G over all nodes: chordal quaternion mean of the per-node
    rotations plus the mean translation residual."""
    M = np.zeros((4, 4))
    for lp, gp in zip(local_poses, global_poses):
        q = quat_canonical(quat_mul(gp.q, quat_inv(lp.q)))
        M += np.outer(q, q)
    w, V = np.linalg.eigh(M)
    q_avg = quat_canonical(V[:, -1] / np.linalg.norm(V[:, -1]))
    R = quat_to_rot(q_avg)
    t = np.mean([gp.t - R @ lp.t for lp, gp in zip(local_poses, global_poses)], axis=0)
    return Pose(q_avg, t)


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Rotation + translation minimizing ||R src + t - dst||^2."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


@dataclass
class FusionConfig:
    strategy: str = "all-nodes"     # or "last-node"
    assoc_tol: float = 0.01
    huber: float | None = 1.0
    max_iter: int = 20


def optimize_graph(local_poses: list[tuple[float, Pose]], fixes: list[GpsFix],
                   cfg: FusionConfig | None = None):
    """Jointly optimize all node poses against VIO edges and GPS factors.

    Returns (global_poses, transform, info) where transform is T_l^G under
    the configured strategy and info carries association and solver stats.
    """
    cfg = cfg or FusionConfig()
    if cfg.strategy not in ("all-nodes", "last-node"):
        raise ValueError(f"unknown transform strategy {cfg.strategy!r}")
    if len(local_poses) < 2:
        raise ValueError("pose graph needs at least two nodes")
    times = [t for t, _ in local_poses]
    poses = [p for _, p in local_poses]
    matches, dropped = associate_fixes(times, fixes, cfg.assoc_tol)
    if not matches:
        raise GaugeError("no GPS fix associated with any node; "
                         "translation and heading are unconstrained")

    # seed nodes with a rigid pre-fit of the matched positions
    if len(matches) >= 3:
        src = np.array([poses[i].t for i, _ in matches])
        dst = np.array([fix.p for _, fix in matches])
        R0, t0 = _kabsch(src, dst)
        seed = Pose(quat_canonical(_project_quat(R0)), t0)
    else:
        seed = Pose(np.array([1.0, 0, 0, 0]), matches[0][1].p - poses[matches[0][0]].t)

    blocks = {}
    for i, p in enumerate(poses):
        init = pose_compose(seed, p)
        blocks[i] = ParamBlock(i, GLOBAL_POSE, np.concatenate([init.t, init.q]))
    terms = []
    for i in range(len(poses) - 1):
        terms.append(VioEdgeTerm(i, i + 1, relative_pose(poses[i], poses[i + 1])))
    for i, fix in matches:
        terms.append(GpsTerm(i, fix, huber=cfg.huber))

    blocks, report = optimize(blocks, terms, OptimizeConfig(max_iter=cfg.max_iter))
    global_poses = [Pose(blocks[i].value[3:7], blocks[i].value[0:3])
                    for i in range(len(poses))]

    if cfg.strategy == "last-node":
        transform = pose_compose(global_poses[-1], pose_inverse(poses[-1]))
    else:
        transform = mean_rigid_transform(poses, global_poses)
    transform = Pose(quat_canonical(transform.q), transform.t)
    info = {
        "matched_fixes": len(matches),
        "dropped_fixes": dropped,
        "iterations": report.iterations,
        "cost0": report.costs[0],
        "cost": report.costs[-1],
        "strategy": cfg.strategy,
    }
    return global_poses, transform, info


def _project_quat(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return rot_to_quat(U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt)
