"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget.

Every test records one pass/fail line; the lines are repeated in the pytest
terminal summary.  Criterion 8 (throughput) is informational: it records its
measurement but never fails the suite.
"""
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from bevloc.bev import BevImage, slope_from_heights
from bevloc.evaluation import (DistortionConfig, evaluate_trajectory, matching_eval, sample_query_frames,
                               umeyama_align_2d, apply_alignment)
from bevloc.features import extract_sift
from bevloc.geometry import Pose2D, Trajectory, se2_apply, wrap_angle
from bevloc.geotiff import GeoTiffReader
from bevloc.ground_grid import merge_moments
from bevloc.kdtree import KDTree, brute_force_nn
from bevloc.map_store import fuse_intensity, inverse_variance_weight, read_map, write_map
from bevloc.pipeline import FrameInput, Localizer, build_map, planar_odometry, records_to_trajectory
from bevloc.pose_filter import apply_correction, correction_cap, project_to_plane
from bevloc.registration import estimate_se2
from bevloc.synth import (DriftModel, LineMarking, MovingBox, SceneSpec, SensorModel, generate_scene,
                          road_world, simulate_drive, straight_path)

# the 1 km worlds use half the default point density to keep the suite short
LONG_DRIVE_POINTS = 32768
QUANT = 1 / 255


@pytest.fixture(scope="module")
def world():
    """1 km road loop in a 1 km x 1 km textured world and its single-session map."""
    t0 = time.perf_counter()
    spec, path = road_world(seed=0, extent=1000.0, path_length=1000.0, spacing=2.0)
    scene = generate_scene(spec)
    model = SensorModel(n_points=LONG_DRIVE_POINTS)
    mapping = simulate_drive(scene, path, model, seed=1)
    n = len(mapping)
    queries_at = set(sample_query_frames(mapping.truth.positions, 100, 1.0, seed=0).tolist())
    queries = []
    prior = build_map(((mapping.truth.stamps[i], mapping.cloud(i)) for i in range(n)),
                      (mapping.truth[i] for i in range(n)),
                      on_frame=lambda i, img: queries.append((i, img)) if i in queries_at else None)
    return dict(scene=scene, path=path, model=model, prior=prior, queries=queries,
                map_seconds=time.perf_counter() - t0)


# -- 1 -----------------------------------------------------------------------------------

def test_criterion_1_equation_units(criterion):
    t0 = time.perf_counter()
    checks = {}
    cs = 0.33
    incline = np.add.outer(np.arange(3) * 0.0, np.arange(3) * cs)  # 45 degrees along +x
    checks["slope_45"] = abs(slope_from_heights(incline, cs) - (1 - 1 / math.sqrt(2))) <= 1e-6
    checks["cap"] = abs(correction_cap(100, 10.0, 15.0) - 200.0 / 3.0) <= 1e-9
    checks["clamp"] = (apply_correction([0.5], 66.67, 0.3)[0] == pytest.approx(0.15, abs=1e-12)
                       and apply_correction([10.0], 1.0, 0.3)[0] == 1.0
                       and apply_correction([-10.0], 1.0, 0.3)[0] == -1.0
                       and apply_correction([5.0], 0.0, 0.3)[0] == 0.0)
    xy, _ = project_to_plane((0.0, 0.0), (3.0, 4.0, 12.0))
    checks["projection"] = np.max(np.abs(xy - [7.8, 10.4])) <= 1e-9
    checks["fusion"] = abs(fuse_intensity([10.0, 20.0], [0.01, 0.1]) - 1200.0 / 110.0) <= 1e-9
    checks["weight_cap"] = inverse_variance_weight(1e-5) == 1000.0 and inverse_variance_weight(0.0) == 1000.0
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 1.0
    failed = [k for k, v in checks.items() if not v]
    criterion(1, ok, f"{len(checks) - len(failed)}/{len(checks)} equation checks in {elapsed:.3f} s"
              + (f", failed {failed}" if failed else ""))
    assert ok


# -- 2 -----------------------------------------------------------------------------------

def _trial(seed, outlier_ratio, n=300, sigma=0.1, extent=50.0):
    rng = np.random.default_rng([2, seed])
    gt = Pose2D(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-math.pi, math.pi))
    q = rng.uniform(-extent, extent, (n, 2))
    m = se2_apply(gt, q) + rng.normal(0, sigma, (n, 2))
    k = int(round(outlier_ratio * n))
    idx = rng.permutation(n)[:k]
    m[idx] = rng.uniform(m.min(axis=0), m.max(axis=0), (k, 2))
    est = estimate_se2(q, map_xy=m).transform
    return math.hypot(est.x - gt.x, est.y - gt.y), abs(math.degrees(wrap_angle(est.yaw - gt.yaw)))


def test_criterion_2_registration_robustness(criterion):
    t0 = time.perf_counter()
    noisy = [_trial(s, 0.6) for s in range(100)]
    clean = [_trial(s, 0.0) for s in range(100)]
    elapsed = time.perf_counter() - t0
    good = sum(te <= 0.2 and re <= 0.5 for te, re in noisy)
    # "within quantization": half a 0.33 m map pixel, and the rotation gate above
    clean_good = sum(te <= 0.165 and re <= 0.5 for te, re in clean)
    ok = good >= 95 and clean_good == 100 and elapsed < 30.0
    criterion(2, ok, f"60% outliers {good}/100 within 0.2 m/0.5 deg, 0% outliers {clean_good}/100, "
                     f"{elapsed:.1f} s")
    assert ok


# -- 3 -----------------------------------------------------------------------------------

def test_criterion_3_matching_eval(world, criterion):
    t0 = time.perf_counter()
    assert len(world["queries"]) == 100
    rep = matching_eval(world["prior"], world["queries"], DistortionConfig(180.0, 20.0), seed=0)
    elapsed = world["map_seconds"] + time.perf_counter() - t0
    ok = rep.success_rate >= 95.0 and rep.mean_trans_err <= 0.7 and elapsed < 300.0
    criterion(3, ok, f"success {rep.success_rate:.1f}%, mean translation error {rep.mean_trans_err:.3f} m "
                     f"(all samples), mean rotation error {rep.mean_rot_err:.3f} deg, {elapsed:.0f} s "
                     "including the map build")
    assert ok


# -- 4 -----------------------------------------------------------------------------------

def test_criterion_4_drift_correction(world, criterion):
    t0 = time.perf_counter()
    drive = simulate_drive(world["scene"], world["path"], world["model"], DriftModel(0.02, 1.0), seed=2)
    frames = (FrameInput(float(drive.truth.stamps[i]), drive.cloud(i), drive.odometry[i]) for i in range(len(drive)))
    records = Localizer(world["prior"]).run(frames)
    elapsed = world["map_seconds"] + time.perf_counter() - t0
    est = evaluate_trajectory(records_to_trajectory(records), drive.truth)
    raw = evaluate_trajectory(planar_odometry(drive.odometry), drive.truth)
    ok = raw.ate >= 2.0 and est.ate <= 0.5 and est.are <= 1.0 and elapsed < 600.0
    criterion(4, ok, f"odometry ATE {raw.ate:.2f} m, corrected ATE {est.ate:.3f} m ARE {est.are:.3f} deg, "
                     f"{sum(r.success for r in records)}/{len(records)} frames registered, {elapsed:.0f} s")
    assert ok


# -- 5 -----------------------------------------------------------------------------------

DOCUMENTED_TAGS = {256, 257, 258, 259, 262, 277, 284, 317, 322, 323, 324, 325, 339, 33550, 33922, 34735, 42113}


def test_criterion_5_map_storage(world, tmp_path, criterion):
    prior = world["prior"]
    path = tmp_path / "map.tif"
    write_map(prior, path)
    size = path.stat().st_size
    ratio_full = size / prior.raw_bytes
    # stricter: only the tiles actually stored, absent tiles are not credited
    stored_raw = len(prior.tile_keys()) * prior.tile_size ** 2 * 3
    ratio_stored = size / stored_raw
    back = read_map(path)
    identical = np.array_equal(back.to_raster(), prior.to_raster()) and back.origin == prior.origin
    path2 = tmp_path / "again.tif"
    write_map(back, path2)
    identical = identical and path2.read_bytes() == path.read_bytes()
    reader = GeoTiffReader(path)
    tags_ok = (set(reader.tags) <= DOCUMENTED_TAGS and reader.compression in (8, 50000)
               and tuple(reader.tags[258]) == (8, 8, 8) and reader.tags[277] == (3,)
               and reader.tags[322] == (256,) and reader.tags[323] == (256,))
    ok = ratio_stored <= 0.35 and ratio_full <= 0.35 and identical and tags_ok
    criterion(5, ok, f"{size / 1e6:.2f} MB, {100 * ratio_stored:.1f}% of stored-tile raw bytes, "
                     f"{100 * ratio_full:.1f}% of full-raster raw bytes, {prior.footprint_km2:.3f} km2 mapped "
                     f"({size / 1e6 / prior.footprint_km2:.2f} MB/km2), round trip "
                     f"{'identical' if identical else 'DIFFERS'}, tags {'ok' if tags_ok else 'NOT ok'}")
    assert ok


# -- 6 -----------------------------------------------------------------------------------

def _crossing_map(movers):
    spec = SceneSpec(extent=(0.0, 0.0, 200.0, 200.0), clutter_density=0.04, seed=5,
                     lines=[LineMarking(0, 96.5, 200, 96.5, 0.2, 0.9), LineMarking(0, 103.5, 200, 103.5, 0.2, 0.9)],
                     movers=movers)
    drive = simulate_drive(generate_scene(spec), straight_path(150.0, 1.0, 10.0, start=(25.0, 100.0)),
                           SensorModel(), seed=1)
    n = len(drive)
    return build_map(((drive.truth.stamps[i], drive.cloud(i)) for i in range(n)), (drive.truth[i] for i in range(n)))


def test_criterion_6_moving_object_suppression(criterion):
    # a 2 m x 4.5 m vehicle crosses the road at x = 100 while the sensor approaches
    mover = MovingBox(2.0, 4.5, 1.5, 100.0, 80.0, 0.0, 4.0, t0=2.0, t1=12.0)
    clean, dynamic = _crossing_map([]), _crossing_map([mover])
    a, b = clean.to_raster().astype(int), dynamic.to_raster().astype(int)
    assert clean.origin == dynamic.origin and a.shape == b.shape
    h, w = a.shape[:2]
    x = clean.origin[0] + (np.arange(w) + 0.5) * clean.resolution
    y = clean.origin[1] + (np.arange(h) + 0.5) * clean.resolution
    X, Y = np.meshgrid(x, y)
    swept = (np.abs(X - 100.0) <= 1.0) & (Y >= 80.0 - 2.25) & (Y <= 120.0 + 2.25)
    both = swept & a.any(-1) & b.any(-1)
    diff = np.abs(a - b)[both]
    worst = diff.max(axis=0)
    over = int((diff > 2).any(axis=-1).sum())
    coverage = both.sum() / swept.sum()
    ok = coverage >= 0.99 and worst.max() <= 2
    criterion(6, ok, f"{int(both.sum())} swept pixels, max difference (I, S, V) = {tuple(int(v) for v in worst)} "
                     f"steps, {over} pixel(s) above 2 steps, mean |dI| {diff[:, 0].mean():.3f} steps")
    assert ok


# -- 7 -----------------------------------------------------------------------------------

def test_criterion_7_determinism(tmp_path, criterion):
    from bevloc.cli import main

    cfg = tmp_path / "config.yaml"
    cfg.write_text("seed: 7\nsynth: {extent: 400.0, n_boxes: 10, n_patches: 3, n_points: 16384}\n")
    ds, mp = tmp_path / "ds", tmp_path / "map.tif"
    assert main(["--config", str(cfg), "synth-gen", "--out", str(ds), "--length", "200"]) == 0
    assert main(["--config", str(cfg), "map-create", "--data", str(ds), "--out", str(mp)]) == 0
    outs = []
    for flags in ([], ["--single-thread"]):
        est, diag = tmp_path / f"est{len(outs)}.tum", tmp_path / f"diag{len(outs)}.jsonl"
        assert main(["--config", str(cfg), *flags, "localize", "--data", str(ds), "--map", str(mp),
                     "--out", str(est), "--diagnostics", str(diag)]) == 0
        outs.append((est.read_bytes(), diag.read_bytes()))
    ok = outs[0] == outs[1]
    n = len(outs[0][1].splitlines())
    criterion(7, ok, f"pipelined and --single-thread localize outputs {'bit-identical' if ok else 'DIFFER'} "
                     f"over {n} frames")
    assert ok


# -- 8 -----------------------------------------------------------------------------------

def test_criterion_8_throughput(world, criterion):
    # about 13% of the rays leave the 60 m range, so cast more to return >= 100k points
    model = SensorModel(n_points=118_000)
    drive = simulate_drive(world["scene"], world["path"], model, DriftModel(0.02, 1.0), seed=3)
    frames = [FrameInput(float(drive.truth.stamps[i]), drive.cloud(i), drive.odometry[i]) for i in range(40)]
    assert min(len(f.cloud) for f in frames) >= 100_000
    loc = Localizer(world["prior"])
    t0 = time.perf_counter()
    loc.run(frames)
    fps = len(frames) / (time.perf_counter() - t0)
    per_stage = {k: round(1000 * v / len(frames), 1) for k, v in loc.stage_time.items()}
    points = int(np.mean([len(f.cloud) for f in frames]))
    criterion(8, fps >= 10.0, f"{fps:.1f} frames/s pipelined on {len(frames)} frames of ~{points} points "
                              f"(target 10, informational, not gating); ms/frame per stage {per_stage}")


# -- 9 -----------------------------------------------------------------------------------

def _sift_descriptors(n_images=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        t = ndimage.gaussian_filter(rng.uniform(0, 1, (400, 400)), 2)
        t = (t - t.min()) / (t.max() - t.min())
        out.append(extract_sift(BevImage(t, t * 0, t * 0, np.ones(t.shape, bool))).descriptors)
    return np.vstack(out)


def test_criterion_9_oracles(criterion):
    d = _sift_descriptors()
    data, queries = d[:2000], d[2000:3000]
    _, ind, _ = KDTree(data).query(queries)
    _, ref = brute_force_nn(queries, data)
    agree = float((ind[:, 0] == ref).mean())

    rng = np.random.default_rng(9)
    worst_var = 0.0
    for _ in range(50):
        x = rng.normal(rng.uniform(-100, 100), rng.uniform(0.01, 5), rng.integers(2, 500))
        cuts = np.sort(rng.choice(np.arange(1, len(x)), size=min(5, len(x) - 1), replace=False))
        n, mean, m2 = 0.0, 0.0, 0.0
        for chunk in np.split(x, cuts):
            cm = chunk.mean()
            n, mean, m2 = merge_moments(n, mean, m2, len(chunk), cm, ((chunk - cm) ** 2).sum())
        worst_var = max(worst_var, abs(m2 / n - np.var(x)) / np.var(x))

    worst_res = 0.0
    for seed in range(20):
        r = np.random.default_rng([9, seed])
        xy = np.cumsum(r.normal(0, 1, (100, 2)), axis=0)
        truth = Trajectory.from_xyyaw(np.arange(100) * 0.1, np.column_stack([xy, r.uniform(-np.pi, np.pi, 100)]))
        moved = apply_alignment(truth, Pose2D(*r.uniform(-100, 100, 2), r.uniform(-np.pi, np.pi)))
        aligned, _ = umeyama_align_2d(moved, truth)
        worst_res = max(worst_res, float(np.max(np.abs(aligned.positions[:, :2] - truth.positions[:, :2]))))

    ok = agree >= 0.99 and worst_var <= 1e-6 and worst_res <= 1e-9
    criterion(9, ok, f"ANN agreement {100 * agree:.2f}% on {len(data)} descriptors, running variance rel. error "
                     f"{worst_var:.1e}, alignment residual {worst_res:.1e} m")
    assert ok
