import math

import numpy as np
import pytest

from bevloc.bev import BevImage
from bevloc.evaluation import (DistortionConfig, distort_bev, evaluate_trajectory, matching_eval,
                               sample_query_frames)
from bevloc.geometry import Pose2D, Pose3D
from bevloc.map_store import MapAccumulator
from bevloc.pipeline import (FrameInput, Localizer, PipelineSettings, build_map, planar_odometry,
                             records_to_trajectory)
from bevloc.synth import DriftModel, SensorModel, generate_scene, road_world, simulate_drive

N = 50


@pytest.fixture(scope="module")
def world():
    spec, path = road_world(seed=3, extent=400, path_length=400, spacing=2.0, n_boxes=6, n_patches=3)
    scene = generate_scene(spec)
    model = SensorModel(n_points=16384)
    mapping = simulate_drive(scene, path, model, seed=1)
    sel = set(sample_query_frames(mapping.truth.positions[:N], 10, 1.0, seed=0).tolist())
    snaps = []
    prior = build_map(((mapping.truth.stamps[i], mapping.cloud(i)) for i in range(N)),
                      (mapping.truth[i] for i in range(N)),
                      on_frame=lambda i, img: snaps.append((i, img)) if i in sel else None)
    drive = simulate_drive(scene, path, model, DriftModel(0.05, 1.0), seed=2)
    frames = [FrameInput(float(drive.truth.stamps[i]), drive.cloud(i), drive.odometry[i]) for i in range(N)]
    return dict(scene=scene, model=model, prior=prior, snaps=snaps, drive=drive, frames=frames)


def _image(n=64, res=0.5):
    rng = np.random.default_rng(0)
    inten = rng.uniform(0.1, 1.0, (n, n))
    return BevImage(inten, np.zeros((n, n)), np.zeros((n, n)), np.ones((n, n), bool), res, (10.0, 20.0))


def test_distort_identity_is_noop():
    img = _image()
    out, D = distort_bev(img, 0.0, (0.0, 0.0))
    np.testing.assert_allclose(out.intensity, img.intensity, atol=1e-6)
    assert D.as_array() == pytest.approx([0, 0, 0])


def test_distort_moves_points_as_documented():
    n, res = 65, 0.5
    inten = np.zeros((n, n))
    inten[32, 42] = 1.0  # 10 px to +x of the centre pixel
    img = BevImage(inten, np.zeros((n, n)), np.zeros((n, n)), np.ones((n, n), bool), res, (0.0, 0.0))
    out, D = distort_bev(img, math.pi / 2, (3.0, -2.0))
    p = img.origin + (np.array([42, 32]) + 0.5) * res  # world (x, y) of the bright pixel
    q = np.array([math.cos(D.yaw) * p[0] - math.sin(D.yaw) * p[1], math.sin(D.yaw) * p[0] + math.cos(D.yaw) * p[1]])
    q = q + D.t
    r, c = np.unravel_index(np.argmax(out.intensity), out.shape)
    got = np.array(out.origin) + (np.array([c, r]) + 0.5) * res
    np.testing.assert_allclose(got, q, atol=1e-9)
    # a quarter turn about the centre: +x becomes +y
    assert (r, c) == (42, 32)
    assert not out.mask[0, 0] or out.mask.all()


def test_sample_query_frames_spacing():
    xy = np.column_stack([np.arange(0, 10, 0.25), np.zeros(40)])
    idx = sample_query_frames(xy, 5, 1.0, seed=1, warmup=2.0)
    assert len(idx) == 5 and np.all(idx % 4 == 0) and idx.min() >= 8
    assert np.array_equal(idx, sample_query_frames(xy, 5, 1.0, seed=1, warmup=2.0))


def test_matching_eval_recovers_distortions(world):
    rep = matching_eval(world["prior"], world["snaps"], DistortionConfig(), seed=4)
    assert rep.n == len(world["snaps"])
    assert rep.success_rate >= 90.0
    assert rep.mean_trans_err_success < 0.5
    again = matching_eval(world["prior"], world["snaps"], DistortionConfig(), seed=4)
    assert rep.to_lines() == again.to_lines()


def test_sequential_equals_pipelined(world):
    loc = Localizer(world["prior"])
    a = [r.to_dict() for r in loc.run(world["frames"], single_thread=True)]
    b = [r.to_dict() for r in Localizer(world["prior"], index=loc.index).run(world["frames"])]
    assert len(a) == N and a == b


def test_localization_reduces_drift(world):
    recs = Localizer(world["prior"]).run(world["frames"], single_thread=True)
    d = world["drive"]
    est = records_to_trajectory(recs)
    raw = records_to_trajectory(Localizer(world["prior"], PipelineSettings(register=False))
                                .run(world["frames"], single_thread=True))
    e_est = evaluate_trajectory(est, d.truth)
    e_raw = evaluate_trajectory(raw, d.truth)
    assert e_est.ate < e_raw.ate
    assert sum(r.success for r in recs) >= 0.8 * N


def test_registration_disabled_passes_odometry_through(world):
    s = PipelineSettings(register=False)
    recs = Localizer(world["prior"], s).run(world["frames"], single_thread=True)
    raw = planar_odometry(world["drive"].odometry)
    est = records_to_trajectory(recs)
    np.testing.assert_allclose(est.positions[:, :2], raw.positions[:N, :2], atol=1e-9)
    np.testing.assert_allclose(est.yaws, raw.yaws[:N], atol=1e-12)


def test_stationary_sequence_constant_pose(world):
    f = world["frames"][5]
    frames = [FrameInput(f.stamp + 0.1 * k, f.cloud, f.odom) for k in range(6)]
    recs = Localizer(world["prior"], PipelineSettings(register=False)).run(frames, single_thread=True)
    poses = np.array([r.pose.as_array() for r in recs])
    assert np.ptp(poses, axis=0).max() == 0.0


def test_resolution_mismatch_rejected(world):
    acc = MapAccumulator(0.2)
    img = world["snaps"][0][1]
    coarse = BevImage(img.intensity[::2, ::2], img.slope[::2, ::2], img.variance[::2, ::2],
                      img.mask[::2, ::2], 0.2, img.origin)
    acc.accumulate(coarse)
    with pytest.raises(ValueError):
        Localizer(acc.finalize())


def test_build_map_needs_frames():
    with pytest.raises(ValueError):
        build_map([], [])
