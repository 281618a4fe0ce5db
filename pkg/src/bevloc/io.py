"""Point cloud and trajectory file formats.

Point clouds use the KITTI ``.bin`` layout: consecutive little-endian float32
quadruples ``x, y, z, intensity``.  Trajectories are either TUM text
(``stamp tx ty tz qx qy qz qw``) or KITTI pose matrices (12 floats of a 3x4
row-major matrix per line, stamps implicit 0, 1, 2, ...).
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .geometry import PointCloud, Trajectory, matrix_to_quat, quat_to_matrix

QUAT_RENORM_TOL = 1e-3
TRAJECTORY_FORMATS = ("tum", "kitti_mat")


class MalformedFileError(ValueError):
    pass


def load_pointcloud_bin(path, stamp: float = 0.0, frame_id: str = "lidar") -> PointCloud:
    size = os.path.getsize(path)
    if size % 16:
        raise MalformedFileError(f"{path}: size {size} is not a multiple of 16 bytes")
    data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        raise MalformedFileError(f"{path}: non-finite value in point {int(np.flatnonzero(bad)[0])}")
    return PointCloud(data, stamp=stamp, frame_id=frame_id)


def save_pointcloud_bin(cloud, path) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    np.ascontiguousarray(pts, dtype="<f4").tofile(path)


def _check_quat(q, lineno: int, path) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    dev = abs(n - 1.0)
    if dev >= QUAT_RENORM_TOL:
        raise MalformedFileError(f"{path}:{lineno}: quaternion norm {n:.6g} is not unit")
    if dev > 1e-12:
        q = q / n
    return q


def load_trajectory(path, format: str = "tum") -> Trajectory:
    if format not in TRAJECTORY_FORMATS:
        raise ValueError(f"unknown trajectory format {format!r}")
    stamps, positions, quats, mats = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.replace(",", " ").split()]
            if format == "tum":
                if len(vals) != 8:
                    raise MalformedFileError(f"{path}:{lineno}: expected 8 values, got {len(vals)}")
                t = vals[0]
                if stamps and t <= stamps[-1]:
                    raise MalformedFileError(
                        f"{path}:{lineno}: stamp {t} not greater than previous {stamps[-1]}")
                stamps.append(t)
                positions.append(vals[1:4])
                quats.append(_check_quat(vals[4:8], lineno, path))
            else:
                if len(vals) != 12:
                    raise MalformedFileError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
                m = np.array(vals).reshape(3, 4)
                R = m[:, :3]
                if np.abs(R @ R.T - np.eye(3)).max() >= QUAT_RENORM_TOL:
                    raise MalformedFileError(f"{path}:{lineno}: rotation block is not orthonormal")
                stamps.append(float(len(stamps)))
                positions.append(m[:, 3])
                quats.append(_check_quat(matrix_to_quat(R), lineno, path))
                mats.append(R)
    traj = Trajectory(np.array(stamps), np.array(positions).reshape(-1, 3),
                      np.array(quats).reshape(-1, 4))
    if format == "kitti_mat":
        traj.matrices = np.array(mats).reshape(-1, 3, 3)
    return traj


def save_trajectory(traj: Trajectory, path, format: str = "tum") -> None:
    if format not in TRAJECTORY_FORMATS:
        raise ValueError(f"unknown trajectory format {format!r}")
    lines = []
    if format == "tum":
        for t, p, q in zip(traj.stamps, traj.positions, traj.quats):
            lines.append(" ".join(repr(float(v)) for v in (t, *p, *q)))
    else:
        mats = traj.matrices
        if mats is None or len(mats) != len(traj):
            mats = [quat_to_matrix(q) for q in traj.quats]
        for R, p in zip(mats, traj.positions):
            m = np.column_stack([R, p])
            lines.append(" ".join(repr(float(v)) for v in m.reshape(-1)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# -- frame datasets -------------------------------------------------------------------
#
# A dataset directory holds ``frames.txt`` (one ``<stamp> <relative path>`` line per
# scan), the scans as ``.bin`` files and optionally ``groundtruth.tum``,
# ``odometry.tum`` and ``scene.yaml``.

FRAMES_FILE = "frames.txt"
TRUTH_FILE = "groundtruth.tum"
ODOMETRY_FILE = "odometry.tum"
SCENE_FILE = "scene.yaml"


class Dataset:
    def __init__(self, root, stamps, paths, truth: Trajectory | None = None, odometry: Trajectory | None = None):
        self.root = Path(root)
        self.stamps = np.asarray(stamps, dtype=float)
        self.paths = list(paths)
        self.truth = truth
        self.odometry = odometry

    def __len__(self) -> int:
        return len(self.paths)

    def cloud(self, i: int) -> PointCloud:
        return load_pointcloud_bin(self.root / self.paths[i], stamp=float(self.stamps[i]))

    def missing(self) -> list[str]:
        return [p for p in self.paths if not (self.root / p).is_file()]


def load_dataset(root) -> Dataset:
    root = Path(root)
    index = root / FRAMES_FILE
    if not index.is_file():
        raise FileNotFoundError(f"{index} not found")
    stamps, paths = [], []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2:
            raise MalformedFileError(f"{index}:{lineno}: expected '<stamp> <path>'")
        try:
            stamps.append(float(parts[0]))
        except ValueError:
            raise MalformedFileError(f"{index}:{lineno}: bad stamp {parts[0]!r}")
        paths.append(parts[1])
    truth = load_trajectory(root / TRUTH_FILE) if (root / TRUTH_FILE).is_file() else None
    odom = load_trajectory(root / ODOMETRY_FILE) if (root / ODOMETRY_FILE).is_file() else None
    return Dataset(root, stamps, paths, truth, odom)


def save_dataset(root, frames, truth: Trajectory | None = None, odometry: Trajectory | None = None) -> Dataset:
    """Write ``frames`` (iterable of ``(stamp, cloud)``) and the trajectories under ``root``."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    stamps, paths = [], []
    for i, (stamp, cloud) in enumerate(frames):
        rel = f"frames/{i:06d}.bin"
        save_pointcloud_bin(cloud, root / rel)
        stamps.append(float(stamp))
        paths.append(rel)
    (root / FRAMES_FILE).write_text("".join(f"{s!r} {p}\n" for s, p in zip(stamps, paths)))
    if truth is not None:
        save_trajectory(truth, root / TRUTH_FILE)
    if odometry is not None:
        save_trajectory(odometry, root / ODOMETRY_FILE)
    return Dataset(root, stamps, paths, truth, odometry)


def poses_at(traj: Trajectory, stamps, max_gap: float = 0.05) -> tuple[list, list[int]]:
    """Trajectory poses at ``stamps`` (nearest sample); also the indices of stamps without one."""
    ts = traj.stamps
    j = np.clip(np.searchsorted(ts, stamps), 0, len(ts) - 1)
    left = np.clip(j - 1, 0, len(ts) - 1)
    j = np.where(np.abs(ts[left] - stamps) <= np.abs(ts[j] - stamps), left, j)
    bad = np.flatnonzero(np.abs(ts[j] - stamps) > max_gap).tolist()
    return [traj[int(k)] for k in j], bad
