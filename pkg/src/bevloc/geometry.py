"""Rigid-transform algebra and the basic pose / cloud / trajectory containers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

QUAT_TOL = 1e-6


def wrap_angle(a):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    wrapped = (np.asarray(a, dtype=float) + math.pi) % (2.0 * math.pi) - math.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def t(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def R(self) -> np.ndarray:
        return rot2(self.yaw)

    def inverse(self) -> "Pose2D":
        t = -self.R.T @ self.t
        return Pose2D(t[0], t[1], -self.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def __matmul__(self, other: "Pose2D") -> "Pose2D":
        return se2_compose(self, other)


def se2_apply(pose: Pose2D, points) -> np.ndarray:
    """p' = R(yaw) p + t for an (N, 2) array (or a single point)."""
    pts = np.asarray(points, dtype=float)
    out = pts @ pose.R.T + pose.t
    return out


def se2_compose(a: Pose2D, b: Pose2D) -> Pose2D:
    t = a.R @ b.t + a.t
    return Pose2D(t[0], t[1], a.yaw + b.yaw)


@dataclass(frozen=True)
class Pose3D:
    """Position plus unit quaternion stored as (qx, qy, qz, qw)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    quat: tuple = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        q = tuple(float(v) for v in self.quat)
        if len(q) != 4:
            raise ValueError("quaternion must have 4 components")
        n = math.sqrt(sum(v * v for v in q))
        if abs(n - 1.0) > QUAT_TOL:
            raise ValueError(f"quaternion norm {n} deviates from 1 by more than {QUAT_TOL}")
        object.__setattr__(self, "quat", q)

    @classmethod
    def from_xyz_yaw(cls, x, y, z, yaw) -> "Pose3D":
        return cls(x, y, z, yaw_to_quat(yaw))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def yaw(self) -> float:
        return quat_to_yaw(self.quat)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def to_2d(self) -> Pose2D:
        return Pose2D(self.x, self.y, self.yaw)


def yaw_to_quat(yaw: float) -> tuple:
    return (0.0, 0.0, math.sin(yaw / 2.0), math.cos(yaw / 2.0))


def quat_to_yaw(q) -> float:
    qx, qy, qz, qw = q
    return wrap_angle(math.atan2(2.0 * (qw * qz + qx * qy), 1.0 - 2.0 * (qy * qy + qz * qz)))


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> tuple:
    # Shepperd's method, branch on the largest diagonal term for stability
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    return (x, y, z, w)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points as an (N, 4) float32 array of x, y, z, intensity in the sensor frame."""

    points: np.ndarray
    stamp: float = 0.0
    frame_id: str = "lidar"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (N, 4), got {pts.shape}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite value in point {int(np.flatnonzero(bad)[0])}")
        neg = pts[:, 3] < 0
        if neg.any():
            raise ValueError(f"negative intensity in point {int(np.flatnonzero(neg)[0])}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "stamp", float(self.stamp))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(eq=False)
class Trajectory:
    """Timestamped poses.

    ``positions`` is (N, 3) and ``quats`` is (N, 4) in (qx, qy, qz, qw) order.
    ``matrices`` optionally keeps the exact 3x3 rotations a KITTI file was read
    from so that writing it back is lossless.
    """

    stamps: np.ndarray
    positions: np.ndarray
    quats: np.ndarray
    matrices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        n = len(self.stamps)
        if len(self.positions) != n or len(self.quats) != n:
            raise ValueError("stamps, positions and quats must have equal length")
        if n > 1:
            steps = np.diff(self.stamps)
            if (steps <= 0).any():
                i = int(np.flatnonzero(steps <= 0)[0]) + 1
                raise ValueError(f"stamps not strictly increasing at index {i}")

    def __len__(self) -> int:
        return len(self.stamps)

    def __getitem__(self, i) -> Pose3D:
        q = self.quats[i]
        return Pose3D(*self.positions[i], tuple(q))

    @classmethod
    def from_poses(cls, stamps, poses) -> "Trajectory":
        poses = list(poses)
        if poses and isinstance(poses[0], Pose2D):
            pos = [[p.x, p.y, 0.0] for p in poses]
            quats = [yaw_to_quat(p.yaw) for p in poses]
        else:
            pos = [[p.x, p.y, p.z] for p in poses]
            quats = [p.quat for p in poses]
        return cls(np.asarray(stamps, dtype=float), np.asarray(pos).reshape(-1, 3),
                   np.asarray(quats).reshape(-1, 4))

    @classmethod
    def from_xyyaw(cls, stamps, xyyaw) -> "Trajectory":
        a = np.asarray(xyyaw, dtype=float).reshape(-1, 3)
        pos = np.column_stack([a[:, 0], a[:, 1], np.zeros(len(a))])
        half = a[:, 2] / 2.0
        quats = np.column_stack([np.zeros(len(a)), np.zeros(len(a)), np.sin(half), np.cos(half)])
        return cls(stamps, pos, quats)

    @property
    def yaws(self) -> np.ndarray:
        q = self.quats
        return np.arctan2(2.0 * (q[:, 3] * q[:, 2] + q[:, 0] * q[:, 1]),
                          1.0 - 2.0 * (q[:, 1] ** 2 + q[:, 2] ** 2))

    def xyyaw(self) -> np.ndarray:
        return np.column_stack([self.positions[:, :2], self.yaws])

    def poses2d(self) -> list:
        return [Pose2D(x, y, t) for x, y, t in self.xyyaw()]

    def nearest(self, stamp: float) -> int:
        """Index of the pose closest in time to ``stamp``."""
        i = int(np.searchsorted(self.stamps, stamp))
        if i <= 0:
            return 0
        if i >= len(self.stamps):
            return len(self.stamps) - 1
        return i if self.stamps[i] - stamp < stamp - self.stamps[i - 1] else i - 1
