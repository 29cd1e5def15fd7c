"""Command-line entry point tying the pipeline together.

Subcommands: simulate, check-jacobians, preintegrate, init-align, estimate,
fuse-global, report.  Exit codes: 0 success, 1 verification failure,
2 input/config error, 3 runtime estimation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import dataio
from .alignment import (
    AlignmentPair,
    DegenerateMotionError,
    Extrinsics,
    InitializationError,
    UpToScalePose,
    build_alignment_system,
    refine_gravity,
    solve_alignment,
)
from .global_fusion import FusionConfig, GaugeError, optimize_graph
from .preintegration import NoiseParams, preint_batch
from .quatmath import quat_canonical
from .simulator import SimConfig, Trajectory, TrajectorySpec
from .solver import SolverFailure
from .verification import run_all_gates
from .window import SlidingWindowEstimator, WindowConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

_TRAJECTORY_KEYS = {f.name for f in dataclasses.fields(TrajectorySpec)}
_SIM_KEYS = {f.name for f in dataclasses.fields(SimConfig)}
_ESTIMATE_KEYS = {
    "window_size", "parallax_px", "nominal_focal", "min_tracked",
    "sigma_a", "sigma_g", "sigma_ba", "sigma_bg", "g_mag", "vision_sigma",
    "huber", "max_iter", "step_tol", "cost_rel_tol", "ba_prior_sigma", "min_init_span", "estimate_extrinsics", "max_dt",
    "init", "ideal_imu",
}
_FUSE_KEYS = {"strategy", "assoc_tol", "huber", "max_iter"}
_CHECK_KEYS = {"trials", "seed"}
_TOP_KEYS = {"sim", "estimate", "fuse", "check"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {unknown}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "top level")
    for key, allowed in (("sim", _SIM_KEYS), ("estimate", _ESTIMATE_KEYS),
                         ("fuse", _FUSE_KEYS), ("check", _CHECK_KEYS)):
        if key in cfg:
            if not isinstance(cfg[key], dict):
                raise ConfigError(f"config section {key!r} must be an object")
            _reject_unknown(cfg[key], allowed, f"section {key!r}")
    if "sim" in cfg and "trajectory" in cfg["sim"]:
        _reject_unknown(cfg["sim"]["trajectory"], _TRAJECTORY_KEYS,
                        "section 'sim.trajectory'")
    return cfg


def sim_config_from_dict(d: dict, seed_override=None) -> SimConfig:
    d = dict(d)
    traj = d.pop("trajectory", {})
    try:
        spec = TrajectorySpec(**traj)
        cfg = SimConfig(trajectory=spec, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sim config: {exc}") from exc
    if seed_override is not None:
        cfg.seed = int(seed_override)
    return cfg


def window_config_from_dict(d: dict) -> tuple[WindowConfig, str, bool]:
    d = dict(d)
    init_mode = d.pop("init", "align")
    if init_mode not in ("align", "truth"):
        raise ConfigError(f"estimate.init must be 'align' or 'truth', got {init_mode!r}")
    ideal_imu = bool(d.pop("ideal_imu", False))
    noise = NoiseParams(d.pop("sigma_a", 2e-2), d.pop("sigma_g", 2e-3),
                        d.pop("sigma_ba", 1e-4), d.pop("sigma_bg", 1e-4))
    try:
        cfg = WindowConfig(noise=noise, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid estimate config: {exc}") from exc
    return cfg, init_mode, ideal_imu


# ---------------------------------------------------------------------------
# dataset writing (simulate)
# ---------------------------------------------------------------------------

def write_dataset(cfg: SimConfig, outdir: str) -> dict:
    from . import simulator as sim
    os.makedirs(outdir, exist_ok=True)
    traj = Trajectory(cfg.trajectory)
    samples = sim.gen_imu(traj, cfg)
    landmarks = sim.gen_landmarks(cfg)
    obs, _ = sim.gen_features(traj, cfg, landmarks)
    fixes = sim.gen_gps(traj, cfg)
    sfm = sim.gen_sfm_poses(traj, cfg)

    dataio.write_imu_csv(os.path.join(outdir, "imu.csv"), samples)
    dataio.write_features_csv(os.path.join(outdir, "features.csv"), obs)
    dataio.write_sfm_poses_csv(os.path.join(outdir, "sfm_poses.csv"), sfm)
    dataio.write_extrinsics_json(os.path.join(outdir, "extrinsics.json"),
                                 cfg.p_c_b, np.asarray(cfg.q_c_b))
    dataio.write_gps_csv(os.path.join(outdir, "gps.csv"), fixes,
                         geodetic=cfg.gps_geodetic, origin=cfg.gps_origin)
    gt_rows = [(float(t), traj.frame_state(float(t))) for t in sim.imu_times(cfg)]
    dataio.write_groundtruth_csv(os.path.join(outdir, "groundtruth.csv"), gt_rows)

    manifest = {"seed": cfg.seed, "config": _jsonable(cfg)}
    dataio.write_json(os.path.join(outdir, "sim_manifest.json"), manifest)
    return manifest


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list, np.ndarray)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg_dict = load_config(args.config)
    if "sim" not in cfg_dict:
        raise ConfigError("simulate needs a config file with a 'sim' section")
    cfg = sim_config_from_dict(cfg_dict["sim"], seed_override=args.seed)
    manifest = write_dataset(cfg, args.out)
    print(f"dataset written to {args.out} (seed {manifest['seed']})")
    return EXIT_OK


def cmd_check_jacobians(args) -> int:
    cfg_dict = load_config(args.config).get("check", {})
    trials = args.trials or int(cfg_dict.get("trials", 100))
    seed = int(args.seed if args.seed is not None else cfg_dict.get("seed", 0))
    t0 = time.time()
    table, ok = run_all_gates(trials=trials, seed=seed)
    elapsed = time.time() - t0
    print(f"{'block':42s} {'worst/tol':>10s}  status")
    failures = []
    for name, ratio in table.items():
        status = "pass" if ratio <= 1.0 else "FAIL"
        if ratio > 1.0:
            failures.append(name)
        print(f"{name:42s} {ratio:10.4f}  {status}")
    print(f"{trials} draws per block, {elapsed:.2f}s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        dataio.write_json(os.path.join(args.out, "jacobian_check.json"),
                          {"trials": trials, "seed": seed,
                           "elapsed_s": elapsed, "ratios": table,
                           "passed": ok})
    if not ok:
        print(f"FAILED blocks: {failures} (seed {seed})", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def _load_common(data_dir: str):
    dataio.require_files(data_dir, ["imu.csv"])
    samples = dataio.read_imu_csv(os.path.join(data_dir, "imu.csv"))
    p_c_b, q_c_b = dataio.read_extrinsics_json(
        os.path.join(data_dir, "extrinsics.json"))
    return samples, Extrinsics(p_c_b, q_c_b)


def cmd_preintegrate(args) -> int:
    dataio.require_files(args.data, ["imu.csv"])
    samples = dataio.read_imu_csv(os.path.join(args.data, "imu.csv"))
    noise = NoiseParams(2e-2, 2e-3, 1e-4, 1e-4)
    spans = []
    sfm_path = os.path.join(args.data, "sfm_poses.csv")
    if args.t0 is not None and args.t1 is not None:
        spans = [(float(args.t0), float(args.t1))]
    elif os.path.exists(sfm_path):
        poses = dataio.read_sfm_poses_csv(sfm_path)
        times = [t for _, t, _, _ in poses]
        spans = list(zip(times[:-1], times[1:]))
    else:
        spans = [(samples[0].t, samples[-1].t)]
    out = []
    for t0, t1 in spans:
        chunk = [s for s in samples if t0 - 1e-9 <= s.t <= t1 + 1e-9]
        d = preint_batch(chunk, np.zeros(3), np.zeros(3), noise)
        out.append({
            "t0": t0, "t1": t1, "dt": d.dt_total,
            "alpha": list(d.alpha), "beta": list(d.beta),
            "gamma": list(quat_canonical(d.gamma)),
            "cov_trace": float(np.trace(d.P)),
        })
    path = os.path.join(args.out or args.data, "preintegration.json")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    dataio.write_json(path, {"intervals": out})
    print(f"{len(out)} interval(s) written to {path}")
    return EXIT_OK


def cmd_init_align(args) -> int:
    dataio.require_files(args.data, ["imu.csv", "sfm_poses.csv", "extrinsics.json"])
    samples, ext = _load_common(args.data)
    poses_raw = dataio.read_sfm_poses_csv(os.path.join(args.data, "sfm_poses.csv"))
    n = min(args.frames, len(poses_raw))
    if n < 2:
        raise ConfigError("alignment needs at least two frames")
    poses_raw = poses_raw[:n]
    noise = NoiseParams(2e-2, 2e-3, 1e-4, 1e-4)
    poses, pairs = [], []
    for k, (fid, t, q, p) in enumerate(poses_raw):
        poses.append(UpToScalePose(fid, q, p))
        if k > 0:
            t_prev = poses_raw[k - 1][1]
            chunk = [s for s in samples if t_prev - 1e-9 <= s.t <= t + 1e-9]
            d = preint_batch(chunk, np.zeros(3), np.zeros(3), noise)
            pairs.append(AlignmentPair(d, d.dt_total))
    A, b = build_alignment_system(pairs, poses, ext)
    coarse = solve_alignment(A, b)
    result = refine_gravity(pairs, poses, ext, coarse.gravity, args.g_mag)
    payload = {
        "frames": [int(p[0]) for p in poses_raw],
        "velocities": [list(v) for v in result.velocities],
        "gravity": list(result.gravity),
        "scale": result.scale,
        "condition": result.condition,
        "residual_norm": result.residual_norm,
        "converged": result.converged,
        "refine_iterations": result.refine_iterations,
    }
    path = os.path.join(args.out or args.data, "alignment.json")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    dataio.write_json(path, payload)
    print(f"alignment: scale={result.scale:.6f} |g|={np.linalg.norm(result.gravity):.6f} "
          f"condition={result.condition:.3g}")
    return EXIT_OK


def _truth_lookup(gt_rows):
    times = np.array([t for t, _ in gt_rows])
    states = [s for _, s in gt_rows]

    def lookup(t: float):
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > 1e-6:
            raise KeyError(f"no ground-truth state at t={t}")
        return states[i].copy()
    return lookup


def cmd_estimate(args) -> int:
    dataio.require_files(args.data, ["imu.csv", "features.csv", "extrinsics.json"])
    cfg_dict = load_config(args.config).get("estimate", {})
    wcfg, init_mode, ideal_imu = window_config_from_dict(cfg_dict)
    if args.ideal_imu:
        ideal_imu = True
    if args.init:
        init_mode = args.init

    samples, ext = _load_common(args.data)
    features = dataio.read_features_csv(os.path.join(args.data, "features.csv"))
    sfm_path = os.path.join(args.data, "sfm_poses.csv")
    sfm = {}
    if os.path.exists(sfm_path):
        for fid, _, q, p in dataio.read_sfm_poses_csv(sfm_path):
            sfm[fid] = (q, p)
    gt_path = os.path.join(args.data, "groundtruth.csv")
    truth = None
    gt_rows = None
    if os.path.exists(gt_path):
        gt_rows = dataio.read_groundtruth_csv(gt_path)
        truth = _truth_lookup(gt_rows)
    if init_mode == "truth" and truth is None:
        raise ConfigError("truth initialization requires groundtruth.csv")
    if init_mode == "align" and not sfm:
        raise ConfigError("alignment initialization requires sfm_poses.csv")

    est = SlidingWindowEstimator(wcfg, ext, sfm_poses=sfm, truth=truth,
                                 ideal_imu=ideal_imu,
                                 dump_hessian=args.dump_hessian)
    if init_mode == "truth":
        est.initialize_from_truth()

    frames: dict = {}
    for t, frame_id, feature_id, u, v in features:
        frames.setdefault((t, frame_id), []).append((feature_id, u, v))
    frame_list = sorted(frames.items(), key=lambda kv: kv[0][0])

    t_start = time.time()
    si = 0
    for (t, frame_id), obs in frame_list:
        while si < len(samples) and samples[si].t <= t + 1e-9:
            est.feed_imu(samples[si])
            si += 1
        est.feed_frame(t, obs, frame_id=frame_id)
    runtime = time.time() - t_start

    if not est.initialized:
        msg = "estimator never initialized"
        if est.events:
            msg += f" (last event: {est.events[-1]})"
        raise InitializationError(msg)

    dataio.write_trajectory_csv(os.path.join(args.out or args.data,
                                             "trajectory.csv"), est.trajectory)
    report = est.report()
    report["runtime_s"] = runtime
    if gt_rows is not None:
        rmse, path_len = _rmse_vs_truth(est.trajectory, gt_rows)
        report["position_rmse_m"] = rmse
        report["path_length_m"] = path_len
        print(f"position RMSE {rmse:.4f} m over {path_len:.1f} m path "
              f"({100.0 * rmse / path_len:.3f}%)")
    dataio.write_json(os.path.join(args.out or args.data, "report.json"), report)
    print(f"{len(est.trajectory)} trajectory rows, runtime {runtime:.1f}s")
    return EXIT_OK


def _rmse_vs_truth(trajectory, gt_rows):
    """Position RMSE after removing the unobservable yaw+translation gauge.

    Monocular visual-inertial odometry fixes only gravity; heading and
    origin are free, so the estimate is first fitted to the truth with a
    rotation about gravity plus a translation (the standard evaluation
    alignment), then compared point-wise.
    """
    times = np.array([t for t, _ in gt_rows])
    pos = np.array([s.p for _, s in gt_rows])
    est = np.array([s.p for _, s in trajectory])
    ref = np.array([pos[int(np.argmin(np.abs(times - t)))] for t, _ in trajectory])
    ce, cr = est.mean(axis=0), ref.mean(axis=0)
    de, dr = est - ce, ref - cr
    # planar Procrustes for the yaw angle
    num = float(np.sum(de[:, 0] * dr[:, 1] - de[:, 1] * dr[:, 0]))
    den = float(np.sum(de[:, 0] * dr[:, 0] + de[:, 1] * dr[:, 1]))
    psi = float(np.arctan2(num, den))
    from .quatmath import rot_z
    R = rot_z(psi)
    t_fit = cr - R @ ce
    err2 = np.sum((est @ R.T + t_fit - ref) ** 2, axis=1)
    path_len = float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))
    return float(np.sqrt(np.mean(err2))), path_len


def cmd_fuse_global(args) -> int:
    dataio.require_files(args.data, ["trajectory.csv", "gps.csv"])
    cfg_dict = load_config(args.config).get("fuse", {})
    fcfg = FusionConfig(
        strategy=args.strategy or cfg_dict.get("strategy", "all-nodes"),
        assoc_tol=float(cfg_dict.get("assoc_tol", 0.01)),
        huber=cfg_dict.get("huber", 1.0),
        max_iter=int(cfg_dict.get("max_iter", 20)))
    rows = dataio.read_trajectory_csv(os.path.join(args.data, "trajectory.csv"))
    from .quatmath import Pose
    local = [(t, Pose(s.q, s.p)) for t, s in rows]
    fixes = dataio.read_gps_csv(os.path.join(args.data, "gps.csv"))
    global_poses, transform, info = optimize_graph(local, fixes, fcfg)
    outdir = args.out or args.data
    dataio.write_global_trajectory_csv(
        os.path.join(outdir, "global_trajectory.csv"),
        [(t, gp) for (t, _), gp in zip(local, global_poses)])
    dataio.write_json(os.path.join(outdir, "transform.json"), {
        "q_l_G": [float(x) for x in quat_canonical(transform.q)],
        "p_l_G": [float(x) for x in transform.t],
        "strategy": info["strategy"],
    })
    print(f"fused {len(global_poses)} nodes; matched fixes "
          f"{info['matched_fixes']}, dropped {info['dropped_fixes']}")
    return EXIT_OK


def cmd_report(args) -> int:
    report_path = os.path.join(args.data, "report.json")
    summary = {}
    if os.path.exists(report_path):
        rep = dataio.read_json(report_path)
        opts = rep.get("optimizations", [])
        summary["optimizations"] = len(opts)
        if opts:
            summary["mean_iterations"] = float(np.mean([o["iterations"] for o in opts]))
            summary["final_cost"] = opts[-1]["cost"]
        summary["events"] = len(rep.get("events", []))
        for key in ("position_rmse_m", "path_length_m", "runtime_s"):
            if key in rep:
                summary[key] = rep[key]
    traj_path = os.path.join(args.data, "trajectory.csv")
    if os.path.exists(traj_path):
        rows = dataio.read_trajectory_csv(traj_path)
        summary["trajectory_rows"] = len(rows)
        if rows:
            summary["final_gyro_bias"] = [float(x) for x in rows[-1][1].bg]
    if not summary:
        raise ConfigError(f"nothing to report in {args.data}")
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vistate",
                                description="visual-inertial estimation toolkit")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("check-jacobians", help="finite-difference factor gates")
    common(sp)
    sp.add_argument("--trials", type=int, default=None)
    sp.set_defaults(func=cmd_check_jacobians)

    sp = sub.add_parser("preintegrate", help="preintegrate inertial intervals")
    common(sp, data=True)
    sp.add_argument("--t0", type=float, default=None)
    sp.add_argument("--t1", type=float, default=None)
    sp.set_defaults(func=cmd_preintegrate)

    sp = sub.add_parser("init-align", help="run the visual-inertial alignment")
    common(sp, data=True)
    sp.add_argument("--frames", type=int, default=10)
    sp.add_argument("--g-mag", type=float, default=9.81)
    sp.set_defaults(func=cmd_init_align)

    sp = sub.add_parser("estimate", help="run the sliding-window estimator")
    common(sp, data=True)
    sp.add_argument("--init", choices=["align", "truth"], default=None)
    sp.add_argument("--ideal-imu", action="store_true",
                    help="replace measured increments with truth-consistent ones")
    sp.add_argument("--dump-hessian", default=None, metavar="PATH",
                    help="write the final normal equations to PATH")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("fuse-global", help="fuse local odometry with GPS")
    common(sp, data=True)
    sp.add_argument("--strategy", choices=["all-nodes", "last-node"], default=None)
    sp.set_defaults(func=cmd_fuse_global)

    sp = sub.add_parser("report", help="summarize a run directory")
    common(sp, data=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate" and args.out is None:
        print("simulate requires --out", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InitializationError, DegenerateMotionError, GaugeError,
            SolverFailure) as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
