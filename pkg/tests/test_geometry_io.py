import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevloc.geometry import (PointCloud, Pose2D, Pose3D, Trajectory, matrix_to_quat,
                             quat_to_matrix, se2_apply, se2_compose, wrap_angle)
from bevloc.io import (MalformedFileError, load_pointcloud_bin, load_trajectory,
                       save_pointcloud_bin, save_trajectory)

angles = st.floats(-10, 10, allow_nan=False)
coords = st.floats(-1e3, 1e3, allow_nan=False)
poses = st.builds(Pose2D, coords, coords, angles)


def test_bin_two_points(tmp_path):
    path = tmp_path / "a.bin"
    path.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, 4, 5, 6, 0.7))
    cloud = load_pointcloud_bin(path)
    assert len(cloud) == 2
    np.testing.assert_array_equal(cloud.points, np.float32([[1, 2, 3, 0.5], [4, 5, 6, 0.7]]))


def test_bin_empty(tmp_path):
    path = tmp_path / "e.bin"
    path.write_bytes(b"")
    assert len(load_pointcloud_bin(path)) == 0


def test_bin_bad_stride(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(b"\0" * 24)
    with pytest.raises(MalformedFileError):
        load_pointcloud_bin(path)


def test_bin_non_finite_reports_index(tmp_path):
    path = tmp_path / "n.bin"
    path.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, 4, float("nan"), 6, 0.7))
    with pytest.raises(MalformedFileError, match="point 1"):
        load_pointcloud_bin(path)


def test_bin_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 10, (100, 4)).astype(np.float32)
    save_pointcloud_bin(PointCloud(pts), tmp_path / "r.bin")
    np.testing.assert_array_equal(load_pointcloud_bin(tmp_path / "r.bin").points, pts)


def test_tum_identity(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0.0 0 0 0 0 0 0 1\n")
    traj = load_trajectory(path, "tum")
    assert traj.stamps.tolist() == [0.0]
    assert traj[0] == Pose3D()


def test_kitti_identity(tmp_path):
    path = tmp_path / "k.txt"
    path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    traj = load_trajectory(path, "kitti_mat")
    assert traj.stamps.tolist() == [0.0]
    np.testing.assert_array_equal(traj.quats[0], [0, 0, 0, 1])


def test_tum_monotonicity_error(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")
    with pytest.raises(MalformedFileError, match=":2:"):
        load_trajectory(path, "tum")


def test_tum_bad_quaternion_line(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1.5\n")
    with pytest.raises(MalformedFileError, match=":2:"):
        load_trajectory(path, "tum")


def test_tum_renormalizes_small_deviation(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("0 0 0 0 0 0 0 1.0005\n")
    traj = load_trajectory(path, "tum")
    assert np.linalg.norm(traj.quats[0]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("fmt", ["tum", "kitti_mat"])
def test_trajectory_roundtrip_value_identical(tmp_path, fmt):
    rng = np.random.default_rng(3)
    n = 20
    yaw = rng.uniform(-3, 3, n)
    pitch = rng.uniform(-0.3, 0.3, n)
    quats = []
    for a, b in zip(yaw, pitch):
        cz, sz = math.cos(a), math.sin(a)
        cy, sy = math.cos(b), math.sin(b)
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        quats.append(matrix_to_quat(Rz @ Ry))
    stamps = np.arange(n, dtype=float) if fmt == "kitti_mat" else np.cumsum(rng.uniform(0.05, 0.2, n))
    traj = Trajectory(stamps, rng.uniform(-100, 100, (n, 3)), np.array(quats))
    save_trajectory(traj, tmp_path / "a.txt", fmt)
    first = load_trajectory(tmp_path / "a.txt", fmt)
    save_trajectory(first, tmp_path / "b.txt", fmt)
    second = load_trajectory(tmp_path / "b.txt", fmt)
    assert (tmp_path / "a.txt").read_text() == (tmp_path / "b.txt").read_text()
    np.testing.assert_array_equal(first.positions, second.positions)
    np.testing.assert_array_equal(first.quats, second.quats)
    np.testing.assert_array_equal(first.stamps, second.stamps)
    np.testing.assert_allclose(first.positions, traj.positions, atol=0)
    np.testing.assert_allclose(np.abs(np.sum(first.quats * traj.quats, axis=1)), 1.0, atol=1e-12)


def test_quaternion_matrix_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q2 = np.array(matrix_to_quat(quat_to_matrix(q)))
        assert abs(abs(q @ q2) - 1) < 1e-12


def test_pose3d_rejects_non_unit_quaternion():
    with pytest.raises(ValueError):
        Pose3D(0, 0, 0, (0, 0, 0, 1.01))


def test_pose2d_yaw_normalized():
    assert Pose2D(0, 0, math.pi).yaw == pytest.approx(-math.pi)
    assert -math.pi <= Pose2D(0, 0, 7.0).yaw < math.pi


def test_se2_identity():
    np.testing.assert_array_equal(se2_apply(Pose2D(), [3, 4]), [3, 4])


def test_se2_quarter_turn():
    np.testing.assert_allclose(se2_apply(Pose2D(0, 0, math.pi / 2), [1, 0]), [0, 1], atol=1e-9)


def test_se2_compose_example():
    # [R(pi/2) | (1,0)] . [I | (1,0)] -> t = R(pi/2)(1,0) + (1,0) = (1,1)
    c = se2_compose(Pose2D(1, 0, math.pi / 2), Pose2D(1, 0, 0))
    assert (c.x, c.y, c.yaw) == pytest.approx((1, 1, math.pi / 2), abs=1e-12)


@settings(max_examples=200)
@given(poses, poses, poses)
def test_se2_compose_associative(a, b, c):
    lhs = se2_compose(se2_compose(a, b), c)
    rhs = se2_compose(a, se2_compose(b, c))
    assert lhs.x == pytest.approx(rhs.x, abs=1e-9)
    assert lhs.y == pytest.approx(rhs.y, abs=1e-9)
    assert abs(wrap_angle(lhs.yaw - rhs.yaw)) < 1e-9


@settings(max_examples=200)
@given(poses, poses, st.lists(st.tuples(coords, coords), min_size=1, max_size=5))
def test_se2_apply_respects_composition(a, b, pts):
    p = np.array(pts)
    np.testing.assert_allclose(se2_apply(se2_compose(a, b), p), se2_apply(a, se2_apply(b, p)),
                               atol=1e-9)


def test_pointcloud_rejects_negative_intensity():
    with pytest.raises(ValueError, match="point 0"):
        PointCloud(np.float32([[0, 0, 0, -1]]))


def test_trajectory_nearest():
    traj = Trajectory.from_xyyaw([0.0, 1.0, 2.0], np.zeros((3, 3)))
    assert traj.nearest(0.4) == 0
    assert traj.nearest(0.6) == 1
    assert traj.nearest(5) == 2
