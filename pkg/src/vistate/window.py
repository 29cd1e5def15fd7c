"""Sliding-window estimator: initialization, windowed optimization, and
marginalization bookkeeping.

Feed IMU samples and camera frames in time order.  Until initialization the
window only buffers data; once enough frames with up-to-scale poses exist it
runs the alignment, fixes the gravity-aligned world frame, and from then on
optimizes pose/velocity/bias states plus inverse depths on every frame,
keeping the window bounded by either marginalizing the oldest frame into a
linearized prior (new keyframe) or discarding the second-newest frame and
splicing its inertial samples (non-keyframe).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    AlignmentPair,
    DegenerateMotionError,
    Extrinsics,
    InitializationError,
    UpToScalePose,
    build_alignment_system,
    camera_to_imu,
    refine_gravity,
    solve_alignment,
    world_frame_from_gravity,
)
from .factors import FeatureObs, ImuFactor, ImuFactorTerm, VisionFactorTerm
from .preintegration import (
    FrameState,
    ImuSample,
    NoiseParams,
    PreintegrationDelta,
    delta_from_states,
    preint_batch,
    propagate_state,
)
from .quatmath import cross3, quat_inv, quat_mul, quat_to_rot, rot_to_quat
from .solver import (
    INV_DEPTH,
    POSE,
    SPEED_BIAS,
    OptimizeConfig,
    ParamBlock,
    build_normal_equations,
    dump_system,
    marginalize,
    optimize,
)

logger = logging.getLogger(__name__)


@dataclass
class WindowConfig:
    window_size: int = 10
    parallax_px: float = 20.0       # keyframe threshold, pixel equivalent
    nominal_focal: float = 460.0    # converts pixel thresholds to normalized units
    min_tracked: int = 30
    noise: NoiseParams = field(default_factory=lambda: NoiseParams(2e-2, 2e-3, 1e-4, 1e-4))
    g_mag: float = 9.81
    vision_sigma: float = 1.0 / 460.0
    huber: float | None = 1.0
    max_iter: int = 8
    step_tol: float = 1e-6
    cost_rel_tol: float = 5e-4
    ba_prior_sigma: float | None = 0.25
    min_init_span: float = 2.5    # s of motion required before alignment
    estimate_extrinsics: bool = False
    max_dt: float = 0.02
    min_depth: float = 0.1
    min_triangulation_sine: float = 2e-3

    def __post_init__(self):
        if self.window_size < 4:
            raise ValueError("window size must be at least 4")
        if min(self.parallax_px, self.nominal_focal, self.vision_sigma) <= 0:
            raise ValueError("thresholds must be positive")
        if min(self.noise.sigma_a, self.noise.sigma_g,
               self.noise.sigma_ba, self.noise.sigma_bg) <= 0.0:
            raise ValueError("estimator noise densities must be strictly positive")

    @property
    def parallax_norm(self) -> float:
        return self.parallax_px / self.nominal_focal

    @property
    def gravity(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.g_mag])


class BiasAnchorTerm:
    """Weak zero-mean anchor on one frame's accelerometer bias.

    Uniform circular or otherwise constant-specific-force motion leaves the
    pair (lateral accelerometer bias, global scale) unobservable; a gentle
    absolute prior selects the zero-bias point of that valley without
    fighting genuinely observable bias components.
    """

    def __init__(self, sb_id, sigma: float):
        self.block_ids = (sb_id,)
        self.inv_sigma = 1.0 / sigma

    def residual(self, blocks):
        return blocks[self.block_ids[0]].value[3:6] * self.inv_sigma

    def linearize(self, blocks):
        J = np.zeros((3, 9))
        J[:, 3:6] = np.eye(3) * self.inv_sigma
        return self.residual(blocks), [J]


@dataclass
class _Frame:
    frame_id: int
    t: float
    state: FrameState
    is_keyframe: bool
    samples: list | None = None          # inertial samples covering [prev, this]
    delta: PreintegrationDelta | None = None
    factor: ImuFactor | None = None


class _Track:
    __slots__ = ("fid", "anchor", "inv_depth", "obs", "floor_hits")

    def __init__(self, fid: int):
        self.fid = fid
        self.anchor: int | None = None
        self.inv_depth: float | None = None
        self.obs: dict[int, FeatureObs] = {}
        self.floor_hits = 0


class SlidingWindowEstimator:
    """Single-writer estimator state machine; one instance per stream."""

    def __init__(self, cfg: WindowConfig, extrinsics: Extrinsics,
                 sfm_poses: dict | None = None, truth=None,
                 ideal_imu: bool = False, dump_hessian: str | None = None):
        self.cfg = cfg
        self.ext = extrinsics
        self.sfm_poses = sfm_poses or {}
        self.truth = truth
        if ideal_imu and truth is None:
            raise ValueError("ideal_imu mode needs a ground-truth lookup")
        self.ideal_imu = ideal_imu
        self.dump_hessian = dump_hessian
        self.frames: list[_Frame] = []
        self.tracks: dict[int, _Track] = {}
        self.prior = None
        self.initialized = False
        self._pending: list[ImuSample] = []
        self._last_imu_t = -np.inf
        self._next_frame_id = 0
        self.trajectory: list[tuple[float, FrameState]] = []
        self.events: list[str] = []
        self.opt_reports: list = []
        self.alignment = None
        self._vterms: dict = {}   # (fid, anchor, obs frame) -> VisionFactorTerm

    def initialize_from_truth(self) -> None:
        """Skip the alignment stage and start estimating from ground truth.

        Frame states are seeded from the truth lookup as frames arrive;
        used by verification runs that need an exactly consistent start.
        """
        if self.truth is None:
            raise ValueError("truth initialization needs a ground-truth lookup")
        if self.frames:
            raise ValueError("truth initialization must happen before any frame")
        self.initialized = True
        self.events.append("initialized: ground truth")

    # ------------------------------------------------------------------
    # ingestion
    # ------------------------------------------------------------------
    def feed_imu(self, sample: ImuSample) -> None:
        if sample.t <= self._last_imu_t:
            raise ValueError(f"out-of-order IMU sample at t={sample.t}")
        self._last_imu_t = sample.t
        self._pending.append(sample)

    def pending_span(self) -> float:
        if len(self._pending) < 2:
            return 0.0
        return self._pending[-1].t - self._pending[0].t

    def _cut_pending(self, t: float) -> list[ImuSample]:
        """Samples covering up to t, interpolating the boundary if needed."""
        eps = 1e-9
        if not self._pending:
            raise ValueError("no inertial samples buffered before the frame")
        head = [s for s in self._pending if s.t <= t + eps]
        rest = [s for s in self._pending if s.t > t + eps]
        if not head:
            raise ValueError(f"no inertial sample at or before frame time {t}")
        if head[-1].t < t - eps:
            if not rest:
                raise ValueError(f"inertial stream does not reach frame time {t}")
            s0, s1 = head[-1], rest[0]
            a = (t - s0.t) / (s1.t - s0.t)
            boundary = ImuSample(t, (1 - a) * s0.gyro + a * s1.gyro,
                                 (1 - a) * s0.accel + a * s1.accel)
            head.append(boundary)
        self._pending = [head[-1]] + rest
        return head

    def _make_delta(self, samples, prev: _Frame, t: float):
        d = preint_batch(samples, prev.state.ba, prev.state.bg,
                         self.cfg.noise, self.cfg.max_dt)
        if self.ideal_imu:
            s_a = self.truth(prev.t)
            s_b = self.truth(t)
            alpha, beta, gamma = delta_from_states(s_a, s_b, d.dt_total,
                                                   self.cfg.gravity)
            d.alpha, d.beta, d.gamma = alpha, beta, gamma
        return d

    def feed_frame(self, t: float, observations, frame_id: int | None = None):
        """Close the inertial interval, register observations, advance.

        observations: iterable of (feature_id, u, v) on the normalized
        image plane.
        """
        fid = self._next_frame_id if frame_id is None else int(frame_id)
        self._next_frame_id = fid + 1

        if not self.frames:
            state = self._truth_or_identity(t)
            frame = _Frame(fid, t, state, True)
            self._cut_pending(t)
        else:
            prev = self.frames[-1]
            if t <= prev.t:
                raise ValueError(f"frame time {t} not after previous {prev.t}")
            samples = self._cut_pending(t)
            delta = self._make_delta(samples, prev, t)
            state = (propagate_state(prev.state, delta, self.cfg.gravity)
                     if self.initialized else self._truth_or_identity(t))
            frame = _Frame(fid, t, state, False, samples, delta,
                           ImuFactor(delta, delta.dt_total, self.cfg.gravity))

        shared, parallax = self._register_obs(fid, observations,
                                              frame.delta if self.frames else None)
        if self.frames:
            frame.is_keyframe = (shared >= self.cfg.min_tracked
                                 and parallax >= self.cfg.parallax_norm)
        self.frames.append(frame)

        if not self.initialized:
            span = self.frames[-1].t - self.frames[0].t
            if len(self.frames) >= self.cfg.window_size and span >= self.cfg.min_init_span:
                self.try_initialize()
            if not self.initialized and len(self.frames) > self.cfg.window_size:
                # keep the buffer keyframe-spaced so the alignment sees as
                # long a baseline as the window allows
                if self.frames[-1].is_keyframe or len(self.frames) < 3:
                    self._drop_buffered_oldest()
                else:
                    self._discard_second_newest()
            return

        if len(self.frames) > self.cfg.window_size:
            self.marginalize_policy()
        if len(self.frames) >= 2:
            self._triangulate_new()
            self.optimize_window()
        newest = self.frames[-1]
        self.trajectory.append((newest.t, newest.state.copy()))

    def _truth_or_identity(self, t: float) -> FrameState:
        if self.truth is not None and self.initialized:
            return self.truth(t)
        return FrameState(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3))

    def _register_obs(self, fid: int, observations, delta=None):
        """Extend tracks; returns the shared-feature count with the previous
        frame and their rotation-compensated mean parallax.

        Bearings are de-rotated through the preintegrated inter-frame
        attitude before differencing, so pure rotation does not promote
        keyframes; only translation-induced parallax counts.
        """
        prev_fid = self.frames[-1].frame_id if self.frames else None
        R_comp = None
        if delta is not None:
            Rcb = quat_to_rot(self.ext.q_c_b)
            R_comp = Rcb.T @ quat_to_rot(delta.gamma) @ Rcb
        shared = 0
        par = []
        for feature_id, u, v in observations:
            tr = self.tracks.get(int(feature_id))
            if tr is None:
                tr = _Track(int(feature_id))
                self.tracks[int(feature_id)] = tr
            ob = FeatureObs.from_uv(fid, float(u), float(v))
            if not tr.obs:
                tr.anchor = fid
            if prev_fid is not None and prev_fid in tr.obs:
                shared += 1
                if R_comp is not None:
                    back = R_comp @ ob.bearing  # bearing seen from the previous camera
                    if back[2] > 1e-6:
                        duv = back[:2] / back[2] - tr.obs[prev_fid].uv()
                        par.append(float(np.linalg.norm(duv)))
            tr.obs[fid] = ob
        parallax = float(np.mean(par)) if par else 0.0
        return shared, parallax

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------
    def try_initialize(self) -> bool:
        ids = [f.frame_id for f in self.frames]
        if any(f.delta is None for f in self.frames[1:]):
            return False
        if not all(fid in self.sfm_poses for fid in ids):
            return False
        # rebase the up-to-scale poses onto the first window frame
        q0, p0 = self.sfm_poses[ids[0]]
        R0t = quat_to_rot(q0).T
        poses = []
        for fid in ids:
            qk, pk = self.sfm_poses[fid]
            poses.append(UpToScalePose(fid, quat_mul(quat_inv(q0), qk),
                                       R0t @ (np.asarray(pk) - np.asarray(p0))))
        pairs = [AlignmentPair(f.delta, f.delta.dt_total) for f in self.frames[1:]]
        try:
            A, b = build_alignment_system(pairs, poses, self.ext)
            coarse = solve_alignment(A, b)
            result = refine_gravity(pairs, poses, self.ext, coarse.gravity,
                                    self.cfg.g_mag)
        except (DegenerateMotionError, InitializationError) as exc:
            self.events.append(f"init-failed: {exc}")
            logger.info("initialization attempt failed: %s", exc)
            return False
        self.alignment = result

    # map everything into the gravity-aligned, zero-initial-yaw world frame
        rot_imu, p_cam, corr = camera_to_imu(poses, self.ext)
        R_ref_w = world_frame_from_gravity(result.gravity, rot_imu[0])
        q_ref_w = rot_to_quat(R_ref_w)
        for k, f in enumerate(self.frames):
            p_ref = result.scale * p_cam[k] - corr[k]
            f.state.p = R_ref_w @ p_ref
            f.state.q = quat_mul(q_ref_w, rot_imu[k])
            f.state.v = R_ref_w @ (quat_to_rot(rot_imu[k]) @ result.velocities[k])
            f.state.ba = np.zeros(3)
            f.state.bg = np.zeros(3)
        self.initialized = True
        self.events.append(f"initialized: scale={result.scale:.6f}")
        self._triangulate_new()
        self.optimize_window()
        for f in self.frames:
            self.trajectory.append((f.t, f.state.copy()))
        return True

    # ------------------------------------------------------------------
    # landmarks
    # ------------------------------------------------------------------
    def _camera_pose(self, frame: _Frame):
        Rb = quat_to_rot(frame.state.q)
        Rc = Rb @ quat_to_rot(self.ext.q_c_b)
        pc = frame.state.p + Rb @ self.ext.p_c_b
        return Rc, pc

    def _triangulate_new(self) -> None:
        by_id = {f.frame_id: f for f in self.frames}
        for fid in sorted(self.tracks):
            tr = self.tracks[fid]
            if tr.inv_depth is not None or tr.anchor not in by_id:
                continue
            in_win = [k for k in tr.obs if k in by_id]
            if len(in_win) < 2:
                continue
            Ra, pa = self._camera_pose(by_id[tr.anchor])
            ba = tr.obs[tr.anchor].bearing
            best = None
            for k in in_win:
                if k == tr.anchor:
                    continue
                Rk, pk = self._camera_pose(by_id[k])
                Rrel = Rk.T @ Ra
                trel = Rk.T @ (pa - pk)
                bk = tr.obs[k].bearing
                cross = cross3(bk, Rrel @ ba)
                mag = np.linalg.norm(cross)
                if best is None or mag > best[0]:
                    best = (mag, cross, cross3(bk, trel))
            mag, axis, rhs = best
            if mag < self.cfg.min_triangulation_sine:
                continue
            depth = float(-(axis @ rhs) / (axis @ axis))
            if depth > self.cfg.min_depth:
                tr.inv_depth = 1.0 / depth

    def _active_tracks(self, frame_ids) -> list[_Track]:
        present = set(frame_ids)
        out = []
        for fid in sorted(self.tracks):
            tr = self.tracks[fid]
            if (tr.inv_depth is not None and tr.anchor in present
                    and sum(1 for k in tr.obs if k in present) >= 2):
                out.append(tr)
        return out

    # ------------------------------------------------------------------
    # optimization
    # ------------------------------------------------------------------
    def _build_blocks_terms(self, frames: list[_Frame], include_prior=True):
        blocks: dict = {}
        ext_id = ("ext",)
        blocks[ext_id] = ParamBlock(
            ext_id, POSE, np.concatenate([self.ext.p_c_b, self.ext.q_c_b]),
            fixed=not self.cfg.estimate_extrinsics)
        for f in frames:
            blocks[("p", f.frame_id)] = ParamBlock(
                ("p", f.frame_id), POSE, np.concatenate([f.state.p, f.state.q]))
            blocks[("sb", f.frame_id)] = ParamBlock(
                ("sb", f.frame_id), SPEED_BIAS,
                np.concatenate([f.state.v, f.state.ba, f.state.bg]))
        if self.prior is None:
            blocks[("p", frames[0].frame_id)].fixed = True

        terms: list = []
        if include_prior and self.prior is not None:
            terms.append(self.prior)
        if include_prior and self.cfg.ba_prior_sigma is not None:
            terms.append(BiasAnchorTerm(("sb", frames[0].frame_id),
                                        self.cfg.ba_prior_sigma))
        for fa, fb in zip(frames[:-1], frames[1:]):
            terms.append(ImuFactorTerm(fb.factor,
                                       ("p", fa.frame_id), ("sb", fa.frame_id),
                                       ("p", fb.frame_id), ("sb", fb.frame_id)))
        frame_ids = [f.frame_id for f in frames]
        present = set(frame_ids)
        n_vision = 0
        for tr in self._active_tracks(frame_ids):
            lid = ("lm", tr.fid)
            blocks[lid] = ParamBlock(lid, INV_DEPTH, [tr.inv_depth])
            for k in sorted(tr.obs):
                if k == tr.anchor or k not in present:
                    continue
                terms.append(self._vision_term(tr, k))
                n_vision += 1
        return blocks, terms, n_vision

    def _vision_term(self, tr: _Track, obs_fid: int) -> VisionFactorTerm:
        key = (tr.fid, tr.anchor, obs_fid)
        term = self._vterms.get(key)
        if term is None:
            term = VisionFactorTerm(
                tr.obs[tr.anchor].bearing, tr.obs[obs_fid],
                ("p", tr.anchor), ("p", obs_fid), ("ext",), ("lm", tr.fid),
                self.cfg.vision_sigma, huber=self.cfg.huber)
            self._vterms[key] = term
        return term

    def optimize_window(self):
        frames = self.frames
        blocks, terms, n_vision = self._build_blocks_terms(frames)
        n_imu = len(frames) - 1
        cfg = OptimizeConfig(max_iter=self.cfg.max_iter,
                             step_tol=self.cfg.step_tol,
                             cost_rel_tol=self.cfg.cost_rel_tol,
                             max_rejects=4)
        blocks, report = optimize(blocks, terms, cfg)
        self.opt_reports.append({
            "t": frames[-1].t, "cost0": report.costs[0],
            "cost": report.costs[-1], "iterations": report.iterations,
            "reason": report.reason, "imu_factors": n_imu,
            "vision_factors": n_vision,
        })
        for f in frames:
            pv = blocks[("p", f.frame_id)].value
            sb = blocks[("sb", f.frame_id)].value
            f.state = FrameState(pv[0:3], pv[3:7], sb[0:3], sb[3:6], sb[6:9])
        if self.cfg.estimate_extrinsics:
            ev = blocks[("ext",)].value
            self.ext = Extrinsics(ev[0:3], ev[3:7])
        for fid in sorted(self.tracks):
            tr = self.tracks[fid]
            lid = ("lm", fid)
            if lid in blocks:
                lam = float(blocks[lid].value[0])
                if lam <= 1.1e-6:
                    tr.floor_hits += 1
                    if tr.floor_hits >= 2:
                        tr.inv_depth = None   # dropped from future problems
                        continue
                tr.inv_depth = lam
        if self.dump_hessian:
            sys = build_normal_equations(terms, blocks)
            dump_system(sys, self.dump_hessian)
        return report

    # ------------------------------------------------------------------
    # window maintenance
    # ------------------------------------------------------------------
    def marginalize_policy(self):
        if self.frames[-1].is_keyframe:
            self._marginalize_oldest()
        else:
            self._discard_second_newest()

    def _marginalize_oldest(self):
        frames = self.frames
        f0, f1 = frames[0], frames[1]
        blocks, _, _ = self._build_blocks_terms(frames, include_prior=False)
        terms: list = []
        if self.prior is not None:
            terms.append(self.prior)
        terms.append(ImuFactorTerm(f1.factor,
                                   ("p", f0.frame_id), ("sb", f0.frame_id),
                                   ("p", f1.frame_id), ("sb", f1.frame_id)))
        frame_ids = [f.frame_id for f in frames]
        present = set(frame_ids)
        marg_lm = []
        for tr in self._active_tracks(frame_ids):
            if tr.anchor != f0.frame_id:
                continue
            lid = ("lm", tr.fid)
            marg_lm.append(lid)
            for k in sorted(tr.obs):
                if k == tr.anchor or k not in present:
                    continue
                terms.append(self._vision_term(tr, k))
        touched = set()
        for term in terms:
            touched.update(term.block_ids)
        sub_blocks = {bid: blk for bid, blk in blocks.items() if bid in touched}
        sys = build_normal_equations(terms, sub_blocks)
        marg_ids = [("p", f0.frame_id), ("sb", f0.frame_id)] + marg_lm
        self.prior = marginalize(sys, marg_ids, sub_blocks)
        self.events.append(f"marginalize-old frame {f0.frame_id}")

        self.frames.pop(0)
        self.frames[0].delta = None
        self.frames[0].factor = None
        self.frames[0].samples = None
        self._remove_frame_obs(f0.frame_id, kill_anchored=True)

    def _discard_second_newest(self):
        frames = self.frames
        mid = frames[-2]
        prev = frames[-3]
        newest = frames[-1]
        merged = mid.samples + newest.samples[1:]
        delta = self._make_delta(merged, prev, newest.t)
        newest.samples = merged
        newest.delta = delta
        newest.factor = ImuFactor(delta, delta.dt_total, self.cfg.gravity)
        # the prior may reference the dropped states; reduce it onto the rest
        drop_ids = [("p", mid.frame_id), ("sb", mid.frame_id)]
        if self.prior is not None and any(b in self.prior.block_ids for b in drop_ids):
            pb = {bid: ParamBlock(bid, self.prior.kinds[bid],
                                  self.prior.lin_values[bid])
                  for bid in self.prior.block_ids}
            sys = build_normal_equations([self.prior], pb)
            self.prior = marginalize(sys, drop_ids, pb)
        self.frames.pop(-2)
        self._remove_frame_obs(mid.frame_id)
        self.events.append(f"discard frame {mid.frame_id}")

    def _drop_buffered_oldest(self):
        f0 = self.frames.pop(0)
        self.frames[0].delta = None
        self.frames[0].factor = None
        self.frames[0].samples = None
        self._remove_frame_obs(f0.frame_id)

    def _remove_frame_obs(self, frame_id: int, kill_anchored: bool = False):
        """Strip a frame's observations.

        kill_anchored=True removes tracks anchored at the frame outright:
        used after marginalization, where their information already lives in
        the prior and re-anchoring the same observations would count them
        twice.  The landmark re-enters as a fresh track when seen again.
        """
        dead = []
        for fid, tr in self.tracks.items():
            if frame_id in tr.obs:
                del tr.obs[frame_id]
            if tr.anchor == frame_id:
                if kill_anchored or not tr.obs:
                    dead.append(fid)
                else:
                    tr.anchor = next(iter(tr.obs))
                    tr.inv_depth = None   # re-triangulated at the new anchor
            elif not tr.obs:
                dead.append(fid)
        for fid in dead:
            del self.tracks[fid]

    # ------------------------------------------------------------------
    def report(self) -> dict:
        return {
            "initialized": self.initialized,
            "frames_processed": self._next_frame_id,
            "events": list(self.events),
            "optimizations": list(self.opt_reports),
            "alignment": None if self.alignment is None else {
                "scale": self.alignment.scale,
                "gravity": list(self.alignment.gravity),
                "condition": self.alignment.condition,
                "converged": self.alignment.converged,
            },
        }
