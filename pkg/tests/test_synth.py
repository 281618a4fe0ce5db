import math

import numpy as np
import pytest

from bevloc.geometry import Pose3D
from bevloc.synth import (Blob, Box, DriftModel, GroundPatch, LineMarking, MovingBox, SceneSpec,
                          SceneSpecError, SensorModel, arc_endpoint, drift_odometry, generate_scene,
                          road_world, rounded_rect_path, simulate_drive, simulate_scan, straight_path)


def _world(points_xyz, pose):
    return points_xyz @ pose.rotation_matrix().T + pose.position


def test_empty_spec_is_flat_uniform_plane():
    sc = generate_scene(SceneSpec())
    x, y = np.meshgrid(np.linspace(0, 199, 20), np.linspace(0, 199, 20))
    assert np.all(sc.height(x, y) == 0.0)
    assert np.allclose(sc.intensity(x, y), round(0.25 * 255) / 255)


def test_45_degree_ramp_matches_analytic_height():
    sc = generate_scene(SceneSpec(patches=[GroundPatch(50, 50, 60, 70, z0=0.0, gx=1.0)]))
    x = np.linspace(50, 59.9, 30)
    np.testing.assert_allclose(sc.height(x, np.full(30, 60.0)), x - 50, atol=1e-12)
    assert sc.height(49.0, 60.0) == 0.0


def test_contradictory_patches_rejected():
    with pytest.raises(SceneSpecError):
        generate_scene(SceneSpec(patches=[GroundPatch(0, 0, 10, 10, z0=0.2), GroundPatch(5, 5, 15, 15, z0=0.3)]))
    # agreeing overlap is fine
    generate_scene(SceneSpec(patches=[GroundPatch(0, 0, 10, 10, z0=0.2), GroundPatch(5, 5, 15, 15, z0=0.2)]))
    with pytest.raises(SceneSpecError):
        generate_scene(SceneSpec(boxes=[Box(190, 190, 210, 195, 2.0)]))


def test_scene_determinism_and_seed_dependence():
    spec = SceneSpec(clutter_density=0.05, seed=3)
    assert generate_scene(spec).digest() == generate_scene(SceneSpec(clutter_density=0.05, seed=3)).digest()
    assert generate_scene(spec).digest() != generate_scene(SceneSpec(clutter_density=0.05, seed=4)).digest()


def test_texture_elements():
    spec = SceneSpec(blobs=[Blob(20, 20, 1.0, 0.8), Blob(40, 40, 1.0, 0.1, shape="square", angle=0.3)],
                     lines=[LineMarking(10, 60, 90, 60, width=0.3, intensity=0.9, dash=3, gap=6)])
    sc = generate_scene(spec)
    assert sc.intensity(20.0, 20.0) == pytest.approx(0.8, abs=1 / 255)
    assert sc.intensity(21.5, 20.0) == pytest.approx(0.25, abs=1 / 255)
    assert sc.intensity(40.0, 40.0) == pytest.approx(0.1, abs=1 / 255)
    assert sc.intensity(11.0, 60.0) == pytest.approx(0.9, abs=1 / 255)  # in a dash
    assert sc.intensity(15.0, 60.0) == pytest.approx(0.25, abs=1 / 255)  # in a gap


def test_spec_mapping_round_trip():
    spec, _ = road_world(seed=1, extent=400, path_length=400, n_boxes=5, n_patches=3)
    spec.movers.append(MovingBox(4, 2, 1.5, 100, 100, 1, 0, 0.0, 10.0))
    back = SceneSpec.from_mapping(spec.to_mapping())
    assert generate_scene(back).digest() == generate_scene(spec).digest()


def test_flat_scene_points_on_plane_within_three_sigma():
    sc = generate_scene(SceneSpec())
    model = SensorModel(n_points=20000, sigma_range=0.02)
    pose = Pose3D.from_xyz_yaw(100, 100, 1.8, 0.4)
    cloud = simulate_scan(sc, pose, model, rng=0)
    w = _world(cloud.xyz.astype(float), pose)
    assert len(cloud) > 5000
    assert np.mean(np.abs(w[:, 2]) <= 3 * 0.02 + 1e-4) >= 0.99


def test_zero_noise_points_lie_on_surfaces():
    spec = SceneSpec(patches=[GroundPatch(110, 90, 120, 110, z0=0.2, gx=0.1)], boxes=[Box(90, 95, 92, 105, 3.0)])
    sc = generate_scene(spec)
    pose = Pose3D.from_xyz_yaw(100, 100, 1.8, 0.0)
    model = SensorModel(n_points=20000, sigma_range=0.0, sigma_intensity=0.0)
    cloud = simulate_scan(sc, pose, model, rng=0)
    w = _world(cloud.xyz.astype(np.float64), pose)
    on_ground = np.abs(w[:, 2] - sc.height(w[:, 0], w[:, 1])) < 1e-3
    on_box = (np.abs(w[:, 0] - 92.0) < 1e-3) | (np.abs(w[:, 2] - 3.0) < 1e-3) | \
        (np.abs(w[:, 1] - 95.0) < 1e-3) | (np.abs(w[:, 1] - 105.0) < 1e-3)
    on_wall = (np.abs(w[:, 0] - 110.0) < 1e-3) | (np.abs(w[:, 1] - 90.0) < 1e-3) | (np.abs(w[:, 1] - 110.0) < 1e-3)
    assert np.all(on_ground | on_box | on_wall)
    assert on_box.sum() > 100


def test_obstacle_shadow_has_no_ground_returns():
    sc = generate_scene(SceneSpec(boxes=[Box(105, 98, 106, 102, 5.0)]))
    pose = Pose3D.from_xyz_yaw(100, 100, 1.8, 0.0)
    cloud = simulate_scan(sc, pose, SensorModel(n_points=40000, sigma_range=0.0), rng=0)
    w = _world(cloud.xyz.astype(float), pose)
    ground = np.abs(w[:, 2]) < 1e-3
    # beyond the box, inside the angular sector it covers (|bearing| < atan(2 / 6))
    bearing = np.arctan2(w[:, 1] - 100, w[:, 0] - 100)
    behind = (w[:, 0] > 106.5) & (np.abs(bearing) < math.atan2(1.9, 6.0))
    assert not np.any(ground & behind)
    assert np.any(~ground & (np.abs(w[:, 0] - 105) < 1e-3))


def test_wedge_fov_gate():
    sc = generate_scene(SceneSpec())
    pose = Pose3D.from_xyz_yaw(100, 100, 1.8, 1.0)
    cloud = simulate_scan(sc, pose, SensorModel(pattern="wedge_fov", fov=70.0, n_points=20000), rng=0)
    az = np.degrees(np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0]))
    assert len(cloud) > 1000
    assert np.all(np.abs(az) <= 35.0 + 1e-4)


def test_lissajous_pattern_within_circular_fov_and_time_varying():
    m = SensorModel(pattern="raster_lissajous", fov=70.0, n_points=5000)
    d0, d1 = m.directions(0.0), m.directions(0.1)
    ang = np.degrees(np.arccos(np.clip(d0 @ np.array([1.0, 0, 0]), -1, 1)))
    assert ang.max() <= 35.0 + 12.0  # elevation centre offset of the default band
    assert not np.allclose(d0, d1)


def test_moving_box_occupancy_and_visibility():
    mv = MovingBox(4.0, 2.0, 1.5, start_x=90, start_y=100, vx=5.0, vy=0.0, t0=0.0, t1=4.0)
    sc = generate_scene(SceneSpec(movers=[mv]))
    assert sc.occupancy(90, 100, 0.0) and not sc.occupancy(90, 100, 2.0)
    assert sc.occupancy(100, 100, 2.0)
    assert not sc.occupancy(100, 100, 5.0)


def test_zero_drift_odometry_equals_truth():
    sc = generate_scene(SceneSpec(extent=(-10, -50, 1100, 50)))
    path = straight_path(1000, 2.0)
    d = simulate_drive(sc, path, drift=DriftModel())
    np.testing.assert_allclose(d.odometry.positions, d.truth.positions, atol=1e-9)
    np.testing.assert_allclose(d.odometry.yaws, d.truth.yaws, atol=1e-12)


def test_yaw_bias_arc_closed_form():
    path = straight_path(1000, 1.0)
    odom = drift_odometry(path, DriftModel(yaw_rate_bias=0.05))
    assert math.degrees(odom.yaws[-1]) == pytest.approx(50.0, abs=1e-6)
    np.testing.assert_allclose(odom.positions[-1, :2], arc_endpoint(1000, 0.05), atol=1e-3)
    # the endpoint error is large and computable
    err = np.linalg.norm(odom.positions[-1, :2] - [1000, 0])
    assert err == pytest.approx(np.linalg.norm(arc_endpoint(1000, 0.05) - [1000, 0]), abs=1e-3)
    assert err > 300


def test_scale_bias_lengthens_steps():
    path = straight_path(100, 1.0)
    odom = drift_odometry(path, DriftModel(scale_bias=1.0))
    assert odom.positions[-1, 0] == pytest.approx(101.0, abs=1e-9)


def test_drive_frames_deterministic():
    spec, path = road_world(seed=2, extent=300, path_length=300, n_boxes=5, n_patches=3, spacing=5.0)
    sc = generate_scene(spec)
    m = SensorModel(n_points=4096)
    a = simulate_drive(sc, path, m, DriftModel(0.02, 1.0), seed=5)
    b = simulate_drive(generate_scene(spec), path, m, DriftModel(0.02, 1.0), seed=5)
    fa, fb = a.frame(7), b.frame(7)
    np.testing.assert_array_equal(fa.cloud.points, fb.cloud.points)
    np.testing.assert_array_equal(a.odometry.positions, b.odometry.positions)
    c = simulate_drive(sc, path, m, seed=6)
    assert not np.array_equal(c.cloud(7).points, fa.cloud.points)


def test_rounded_rect_path_length_and_closure():
    p = rounded_rect_path(300, 200, 30, spacing=1.0)
    steps = np.linalg.norm(np.diff(p.positions[:, :2], axis=0), axis=1)
    assert np.all(steps < 1.0 + 1e-9) and np.all(steps > 0.99)
    perim = 2 * (240 + 140) + 2 * np.pi * 30
    assert steps.sum() == pytest.approx(perim, abs=1.0)


def test_road_world_texture_density():
    spec, path = road_world(seed=0)
    assert spec.extent == (0.0, 0.0, 1000.0, 1000.0)
    xy = path.positions[:, :2]
    assert np.all((xy > 0) & (xy < 1000))
    s = np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1))
    assert s == pytest.approx(1000.0, abs=1.5)
