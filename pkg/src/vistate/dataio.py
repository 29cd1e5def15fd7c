"""Readers and writers for the dataset and result files.

All CSVs are UTF-8 with LF line endings, carry a mandatory header, store
quaternions scalar-first with canonical sign (w >= 0), and print numbers
with 17 significant digits so reruns are byte-comparable.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .global_fusion import GpsFix, lla_to_enu
from .preintegration import FrameState, ImuSample
from .quatmath import Pose, quat_canonical

IMU_HEADER = "t,wx,wy,wz,ax,ay,az"
FEATURES_HEADER = "t,frame_id,feature_id,u,v"
SFM_HEADER = "frame_id,t,qw,qx,qy,qz,px,py,pz"
TRAJECTORY_HEADER = "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz"
GROUNDTRUTH_HEADER = "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz"
GPS_ENU_HEADER = "t,px,py,pz,std_x,std_y,std_z"
GPS_LLA_HEADER = "t,lat,lon,alt,std_x,std_y,std_z"


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _row(values) -> str:
    return ",".join(_fmt(v) for v in values)


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _read_csv(path, expected_header: str) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != expected_header:
            raise ValueError(f"{path}: expected header {expected_header!r}, "
                             f"got {header!r}")
        return [line.strip().split(",") for line in fh if line.strip()]


# -- imu ---------------------------------------------------------------------

def write_imu_csv(path, samples: list[ImuSample]) -> None:
    _write_csv(path, IMU_HEADER,
               (_row([s.t, *s.gyro, *s.accel]) for s in samples))


def read_imu_csv(path) -> list[ImuSample]:
    out = []
    for cols in _read_csv(path, IMU_HEADER):
        v = [float(c) for c in cols]
        out.append(ImuSample(v[0], np.array(v[1:4]), np.array(v[4:7])))
    return out


# -- features ----------------------------------------------------------------

def write_features_csv(path, observations) -> None:
    rows = (f"{_fmt(t)},{int(fr)},{int(ft)},{_fmt(u)},{_fmt(v)}"
            for t, fr, ft, u, v in observations)
    _write_csv(path, FEATURES_HEADER, rows)


def read_features_csv(path):
    out = []
    for cols in _read_csv(path, FEATURES_HEADER):
        out.append((float(cols[0]), int(cols[1]), int(cols[2]),
                    float(cols[3]), float(cols[4])))
    return out


# -- up-to-scale poses -------------------------------------------------------

def write_sfm_poses_csv(path, poses) -> None:
    rows = []
    for frame_id, t, q, p in poses:
        qc = quat_canonical(q)
        rows.append(f"{int(frame_id)},{_fmt(t)},{_row(qc)},{_row(p)}")
    _write_csv(path, SFM_HEADER, rows)


def read_sfm_poses_csv(path):
    out = []
    for cols in _read_csv(path, SFM_HEADER):
        v = [float(c) for c in cols]
        out.append((int(cols[0]), v[1], np.array(v[2:6]), np.array(v[6:9])))
    return out


# -- trajectories ------------------------------------------------------------

def write_trajectory_csv(path, rows: list[tuple[float, FrameState]]) -> None:
    lines = []
    for t, s in rows:
        qc = quat_canonical(s.q)
        lines.append(f"{_fmt(t)},{_row(s.p)},{_row(qc)},{_row(s.v)},"
                     f"{_row(s.ba)},{_row(s.bg)}")
    _write_csv(path, TRAJECTORY_HEADER, lines)


def read_trajectory_csv(path) -> list[tuple[float, FrameState]]:
    out = []
    for cols in _read_csv(path, TRAJECTORY_HEADER):
        v = [float(c) for c in cols]
        out.append((v[0], FrameState(np.array(v[1:4]), np.array(v[4:8]),
                                     np.array(v[8:11]), np.array(v[11:14]),
                                     np.array(v[14:17]))))
    return out


def write_groundtruth_csv(path, rows) -> None:
    lines = []
    for t, s in rows:
        qc = quat_canonical(s.q)
        lines.append(f"{_fmt(t)},{_row(s.p)},{_row(qc)},{_row(s.v)}")
    _write_csv(path, GROUNDTRUTH_HEADER, lines)


def read_groundtruth_csv(path) -> list[tuple[float, FrameState]]:
    out = []
    for cols in _read_csv(path, GROUNDTRUTH_HEADER):
        v = [float(c) for c in cols]
        out.append((v[0], FrameState(np.array(v[1:4]), np.array(v[4:8]),
                                     np.array(v[8:11]))))
    return out


# -- gps ---------------------------------------------------------------------

def write_gps_csv(path, fixes, geodetic: bool = False, origin=None) -> None:
    """fixes: (t, position ENU, std) triples; geodetic output converts the
    ENU positions back through the origin."""
    if geodetic:
        from .global_fusion import enu_to_lla
        if origin is None:
            raise ValueError("geodetic output needs an origin (lat, lon, alt)")
        rows = []
        for t, p, std in fixes:
            lat, lon, alt = enu_to_lla(p, origin)
            rows.append(f"{_fmt(t)},{_fmt(lat)},{_fmt(lon)},{_fmt(alt)},{_row(std)}")
        _write_csv(path, GPS_LLA_HEADER, rows)
    else:
        rows = (f"{_fmt(t)},{_row(p)},{_row(std)}" for t, p, std in fixes)
        _write_csv(path, GPS_ENU_HEADER, rows)


def read_gps_csv(path) -> list[GpsFix]:
    """Accepts either layout; geodetic rows are converted to ENU about the
    first fix."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        lines = [line.strip().split(",") for line in fh if line.strip()]
    if header == GPS_ENU_HEADER:
        return [GpsFix(float(c[0]), np.array([float(x) for x in c[1:4]]),
                       np.array([float(x) for x in c[4:7]])) for c in lines]
    if header == GPS_LLA_HEADER:
        if not lines:
            return []
        origin = tuple(float(x) for x in lines[0][1:4])
        out = []
        for c in lines:
            enu = lla_to_enu(float(c[1]), float(c[2]), float(c[3]), origin)
            out.append(GpsFix(float(c[0]), enu,
                              np.array([float(x) for x in c[4:7]])))
        return out
    raise ValueError(f"{path}: unrecognized GPS header {header!r}")


def write_global_trajectory_csv(path, rows: list[tuple[float, Pose]]) -> None:
    lines = []
    for t, pose in rows:
        qc = quat_canonical(pose.q)
        lines.append(f"{_fmt(t)},{_row(pose.t)},{_row(qc)}")
    _write_csv(path, "t,px,py,pz,qw,qx,qy,qz", lines)


# -- json --------------------------------------------------------------------

def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_extrinsics_json(path, p_c_b, q_c_b) -> None:
    write_json(path, {"p_c_b": [float(x) for x in p_c_b],
                      "q_c_b": [float(x) for x in quat_canonical(q_c_b)]})


def read_extrinsics_json(path):
    data = read_json(path)
    return np.asarray(data["p_c_b"], dtype=float), np.asarray(data["q_c_b"], dtype=float)


def require_files(directory, names) -> None:
    missing = [n for n in names if not os.path.exists(os.path.join(directory, n))]
    if missing:
        raise FileNotFoundError(f"dataset at {directory} is missing {missing}")
