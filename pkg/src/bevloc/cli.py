"""Command line entry points.

    bevloc synth-gen   --out DIR [--length M] [--spacing M] [--yaw-bias DEG_PER_M] [--scale-bias PCT]
    bevloc map-create  --data DIR --out MAP.tif
    bevloc localize    --data DIR --map MAP.tif --out EST.tum [--diagnostics F.jsonl] [--no-register]
    bevloc match-eval  --data DIR [--map MAP.tif] [--samples N] [--out REPORT.jsonl]
    bevloc eval-traj   --estimate EST.tum --truth GT.tum [--out REPORT.json]

Global flags (before or after the subcommand): ``--config FILE``, ``--seed N``,
``--assert`` (exit code 2 when an acceptance threshold is violated) and
``--single-thread``.  Config values can also be set through ``BEVLOC_*``
environment variables (see ``bevloc.config``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, load_config
from .evaluation import (DistortionConfig, associate, evaluate_trajectory, matching_eval, position_errors,
                         sample_query_frames, umeyama_align_2d)
from .geometry import Pose2D, Trajectory, se2_compose
from .io import SCENE_FILE, Dataset, load_dataset, load_trajectory, poses_at, save_dataset, save_trajectory
from .map_store import mb_per_km2, read_map, storage_ratio, write_map
from .pipeline import (FrameInput, Localizer, PipelineSettings, build_map, planar_odometry, query_images,
                       records_to_trajectory)

log = logging.getLogger("bevloc")

EXIT_OK, EXIT_ERROR, EXIT_ASSERT = 0, 1, 2

# acceptance thresholds checked under --assert; override in the ``eval`` config section
DEFAULT_THRESHOLDS = {
    "max_ate": 0.5,  # m
    "max_are": 1.0,  # degrees
    "min_success_rate": 95.0,  # percent
    "max_mean_trans_err": 0.7,  # m
}


class CommandError(RuntimeError):
    pass


def _thresholds(cfg: RunConfig) -> dict:
    return {**DEFAULT_THRESHOLDS, **{k: float(v) for k, v in cfg.eval.items() if k in DEFAULT_THRESHOLDS}}


def _check(violations: list[str]) -> int:
    for v in violations:
        print(f"ASSERT FAILED: {v}", file=sys.stderr)
    return EXIT_ASSERT if violations else EXIT_OK


def _open_dataset(path) -> Dataset:
    ds = load_dataset(path)
    missing = ds.missing()
    if missing:
        listing = "\n  ".join(missing[:20]) + ("\n  ..." if len(missing) > 20 else "")
        raise CommandError(f"{len(missing)} frame file(s) missing under {path}:\n  {listing}")
    if len(ds) == 0:
        raise CommandError(f"{path}: no frames")
    return ds


def _frame_poses(ds: Dataset, traj: Trajectory | None, what: str):
    if traj is None:
        raise CommandError(f"{ds.root}: no {what} trajectory")
    poses, bad = poses_at(traj, ds.stamps)
    if bad:
        raise CommandError(f"{what} trajectory does not cover {len(bad)} frame stamp(s), first {ds.stamps[bad[0]]}")
    return poses


def _write_lines(path, lines) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines))


def _write_plot_data(out_dir, est: Trajectory, truth: Trajectory | None) -> None:
    """Plain-text plot data: poses, error over time and an error-coloured track."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xyyaw = est.xyyaw()
    np.savetxt(out / "pose.txt", np.column_stack([est.stamps, xyyaw]), header="stamp x y yaw", fmt="%.9g")
    if truth is None:
        return
    rows = position_errors(est, truth)
    np.savetxt(out / "track_error.txt", rows, header="x y err", fmt="%.9g")
    aligned, _ = umeyama_align_2d(est, truth)
    ei, ti = associate(aligned, truth)
    err = np.linalg.norm(aligned.positions[ei, :2] - truth.positions[ti, :2], axis=1)
    np.savetxt(out / "error_vs_time.txt", np.column_stack([aligned.stamps[ei], err]), header="stamp err",
               fmt="%.9g")


# -- subcommands ----------------------------------------------------------------------

def cmd_synth_gen(args, cfg: RunConfig) -> int:
    from .synth import DriftModel, SensorModel, generate_scene, road_world, simulate_drive

    s = dict(cfg.synth)
    length = args.length if args.length is not None else float(s.get("length", 1000.0))
    spacing = args.spacing if args.spacing is not None else float(s.get("spacing", 2.0))
    extent = float(s.get("extent", max(1000.0, length / 3)))
    spec, path = road_world(cfg.seed, extent=extent, path_length=length, spacing=spacing,
                            clutter_density=float(s.get("clutter_density", 0.04)),
                            n_boxes=int(s.get("n_boxes", 60)), n_patches=int(s.get("n_patches", 12)))
    model = SensorModel(pattern=args.pattern or s.get("pattern", "rings_360"),
                        n_points=args.points or int(s.get("n_points", 32768)))
    drift = DriftModel(args.yaw_bias if args.yaw_bias is not None else float(s.get("yaw_rate_bias", 0.02)),
                       args.scale_bias if args.scale_bias is not None else float(s.get("scale_bias", 1.0)))
    drive_seed = args.drive_seed if args.drive_seed is not None else int(s.get("drive_seed", cfg.seed + 1))
    scene = generate_scene(spec)
    drive = simulate_drive(scene, path, model, drift, seed=drive_seed)
    out = Path(args.out)
    save_dataset(out, ((float(drive.truth.stamps[i]), drive.cloud(i)) for i in range(len(drive))),
                 drive.truth, drive.odometry)
    meta = {"scene": spec.to_mapping(), "drive_seed": drive_seed,
            "sensor": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(model).items()},
            "drift": {"yaw_rate_bias": drift.yaw_rate_bias, "scale_bias": drift.scale_bias}}
    (out / SCENE_FILE).write_text(yaml.safe_dump(meta, sort_keys=True))
    print(f"wrote {len(drive)} frames over {length:.0f} m to {out}")
    return EXIT_OK


def cmd_map_create(args, cfg: RunConfig) -> int:
    ds = _open_dataset(args.data)
    traj = load_trajectory(args.trajectory) if args.trajectory else ds.truth
    poses = _frame_poses(ds, traj, "mapping")
    settings = PipelineSettings.from_config(cfg)
    t0 = time.perf_counter()
    prior = build_map(((float(ds.stamps[i]), ds.cloud(i)) for i in range(len(ds))), poses, settings)
    write_map(prior, args.out)
    print(f"map {args.out}: {prior.width}x{prior.height} px at {prior.resolution} m, "
          f"footprint {prior.footprint_km2:.4f} km2, {mb_per_km2(args.out, prior):.2f} MB/km2, "
          f"{100 * storage_ratio(args.out, prior):.1f}% of raw, {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _initial_correction(args, odom_first) -> Pose2D:
    if args.initial_pose is None:
        return Pose2D()
    x, y, yaw_deg = args.initial_pose
    o = Pose2D(odom_first.x, odom_first.y, odom_first.yaw)
    return se2_compose(Pose2D(x, y, np.radians(yaw_deg)), o.inverse())


def cmd_localize(args, cfg: RunConfig) -> int:
    ds = _open_dataset(args.data)
    odom_traj = load_trajectory(args.odometry) if args.odometry else ds.odometry
    odom = _frame_poses(ds, odom_traj, "odometry")
    prior = read_map(args.map)
    settings = PipelineSettings.from_config(cfg)
    if args.no_register:
        settings.register = False
    try:
        loc = Localizer(prior, settings, _initial_correction(args, odom[0]))
    except ValueError as e:
        raise CommandError(str(e))
    frames = (FrameInput(float(ds.stamps[i]), ds.cloud(i) if settings.register else None, odom[i])
              for i in range(len(ds)))
    t0 = time.perf_counter()
    records = loc.run(frames, single_thread=args.single_thread)
    elapsed = time.perf_counter() - t0
    est = records_to_trajectory(records)
    save_trajectory(est, args.out)
    if args.diagnostics:
        _write_lines(args.diagnostics, (json.dumps(r.to_dict(), sort_keys=True) for r in records))
    ok = sum(r.success for r in records)
    print(f"localized {len(records)} frames ({ok} registered) in {elapsed:.1f} s, "
          f"{len(records) / max(elapsed, 1e-9):.1f} frames/s")
    log.info("stage seconds: %s", {k: round(v, 2) for k, v in loc.stage_time.items()})
    truth = load_trajectory(args.truth) if args.truth else ds.truth
    if args.plots:
        _write_plot_data(args.plots, est, truth)
    if truth is None:
        return EXIT_OK
    rep = evaluate_trajectory(est, truth)
    print(f"corrected {rep.summary()}")
    raw = evaluate_trajectory(planar_odometry(Trajectory.from_poses(ds.stamps, odom)), truth)
    print(f"odometry  {raw.summary()}")
    if not args.assert_:
        return EXIT_OK
    th = _thresholds(cfg)
    bad = []
    if rep.ate > th["max_ate"]:
        bad.append(f"ATE {rep.ate:.3f} m > {th['max_ate']} m")
    if rep.are > th["max_are"]:
        bad.append(f"ARE {rep.are:.3f} deg > {th['max_are']} deg")
    return _check(bad)


def cmd_match_eval(args, cfg: RunConfig) -> int:
    ds = _open_dataset(args.data)
    poses = _frame_poses(ds, ds.truth, "ground-truth")
    settings = PipelineSettings.from_config(cfg)
    e = cfg.eval
    n = args.samples if args.samples is not None else int(e.get("samples", 100))
    dist = DistortionConfig(float(e.get("max_rotation", 180.0)), float(e.get("max_translation", 20.0)))
    xy = np.array([p.position for p in poses])
    idx = sample_query_frames(xy, n, float(e.get("min_spacing", 1.0)), seed=cfg.seed)
    frames = ((float(ds.stamps[i]), ds.cloud(i)) for i in range(len(ds)))
    if args.map:
        prior = read_map(args.map)
        queries = query_images(frames, poses, idx, settings)
    else:
        want, queries = set(idx.tolist()), []
        prior = build_map(frames, poses, settings,
                          on_frame=lambda i, img: queries.append((i, img)) if i in want else None)
    t0 = time.perf_counter()
    rep = matching_eval(prior, queries, dist, seed=cfg.seed, settings=settings, n_samples=n)
    summary = rep.summary()
    if args.out:
        _write_lines(args.out, rep.to_lines())
    print(json.dumps(summary, sort_keys=True))
    log.info("matching evaluation took %.1f s", time.perf_counter() - t0)
    if not args.assert_:
        return EXIT_OK
    th = _thresholds(cfg)
    bad = []
    if rep.success_rate < th["min_success_rate"]:
        bad.append(f"success rate {rep.success_rate:.1f}% < {th['min_success_rate']}%")
    if not rep.mean_trans_err <= th["max_mean_trans_err"]:
        bad.append(f"mean translation error {rep.mean_trans_err:.3f} m > {th['max_mean_trans_err']} m")
    return _check(bad)


def cmd_eval_traj(args, cfg: RunConfig) -> int:
    est = load_trajectory(args.estimate, args.format)
    truth = load_trajectory(args.truth, args.format)
    rep = evaluate_trajectory(est, truth, args.max_gap)
    out = {"ate_m": rep.ate, "are_deg": rep.are, "pairs": rep.n_pairs, "max_error_m": rep.max_error,
           "alignment": list(rep.alignment)}
    print(json.dumps(out, sort_keys=True))
    if args.out:
        _write_lines(args.out, [json.dumps(out, sort_keys=True)])
    if args.plots:
        _write_plot_data(args.plots, est, truth)
    if not args.assert_:
        return EXIT_OK
    th = _thresholds(cfg)
    bad = []
    if rep.ate > th["max_ate"]:
        bad.append(f"ATE {rep.ate:.3f} m > {th['max_ate']} m")
    if rep.are > th["max_are"]:
        bad.append(f"ARE {rep.are:.3f} deg > {th['max_are']} deg")
    return _check(bad)


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, defaults: bool):
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        parser.add_argument("--config", default=d(None), help="YAML config file")
        parser.add_argument("--seed", type=int, default=d(None), help="overrides the config seed")
        parser.add_argument("--assert", dest="assert_", action="store_true", default=d(False),
                            help="exit with code 2 when an acceptance threshold is violated")
        parser.add_argument("--single-thread", action="store_true", default=d(False),
                            help="run the localization stages sequentially")
        parser.add_argument("-v", "--verbose", action="count", default=d(0))

    p = argparse.ArgumentParser(prog="bevloc", description=__doc__.split("\n\n")[0])
    global_flags(p, True)
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic drive dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--length", type=float, help="path length in metres")
    s.add_argument("--spacing", type=float, help="distance between frames in metres")
    s.add_argument("--pattern", choices=("rings_360", "wedge_fov", "raster_lissajous"))
    s.add_argument("--points", type=int, help="points per scan")
    s.add_argument("--yaw-bias", type=float, help="odometry yaw drift in degrees per metre")
    s.add_argument("--scale-bias", type=float, help="odometry scale error in percent")
    s.add_argument("--drive-seed", type=int, help="seed of the sensor noise (default: seed + 1)")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("map-create", parents=[common], help="build a prior map from frames and poses")
    s.add_argument("--data", required=True)
    s.add_argument("--trajectory", help="mapping poses (default: the dataset ground truth)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_map_create)

    s = sub.add_parser("localize", parents=[common], help="correct odometry against a prior map")
    s.add_argument("--data", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True, help="corrected trajectory (TUM)")
    s.add_argument("--odometry", help="odometry trajectory (default: the dataset odometry)")
    s.add_argument("--truth", help="ground truth for the summary (default: the dataset ground truth)")
    s.add_argument("--initial-pose", type=float, nargs=3, metavar=("X", "Y", "YAW_DEG"),
                   help="map pose of the first frame when odometry is not in map coordinates")
    s.add_argument("--diagnostics", help="per-frame JSON lines")
    s.add_argument("--plots", help="directory for plot data files")
    s.add_argument("--no-register", action="store_true", help="pass odometry through without registration")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("match-eval", parents=[common], help="distorted-query matching evaluation")
    s.add_argument("--data", required=True)
    s.add_argument("--map", help="prior map (default: built from the dataset ground truth)")
    s.add_argument("--samples", type=int)
    s.add_argument("--out", help="per-sample JSON lines plus a summary line")
    s.set_defaults(func=cmd_match_eval)

    s = sub.add_parser("eval-traj", parents=[common], help="ATE/ARE of an estimate against ground truth")
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--format", default="tum", choices=("tum", "kitti_mat"))
    s.add_argument("--max-gap", type=float, default=0.05, help="stamp association tolerance in seconds")
    s.add_argument("--out")
    s.add_argument("--plots", help="directory for plot data files")
    s.set_defaults(func=cmd_eval_traj)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        return args.func(args, cfg)
    except (CommandError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
