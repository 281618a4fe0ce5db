"""Trajectory alignment, ATE/ARE and the matching-evaluation report.

Trajectories are compared in the xy-plane after a closed-form rigid 2D
alignment (scale fixed at 1).  Yaw errors are wrapped to (-180, 180] degrees.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose2D, Trajectory, rot2, wrap_angle

MAX_TRANS_ERR = 2.0  # m
MAX_ROT_ERR = 5.0  # degrees


class AssociationError(ValueError):
    pass


def associate(estimate: Trajectory, truth: Trajectory, max_gap: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-stamp pairs ``(est_idx, truth_idx)`` with ``|dt| <= max_gap``."""
    if len(estimate) == 0 or len(truth) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    ts = truth.stamps
    j = np.clip(np.searchsorted(ts, estimate.stamps), 1, len(ts) - 1) if len(ts) > 1 else \
        np.zeros(len(estimate), np.int64)
    if len(ts) > 1:
        left = j - 1
        use_left = np.abs(estimate.stamps - ts[left]) <= np.abs(ts[j] - estimate.stamps)
        j = np.where(use_left, left, j)
    ok = np.abs(ts[j] - estimate.stamps) <= max_gap
    return np.flatnonzero(ok), j[ok]


def umeyama_2d(src: np.ndarray, dst: np.ndarray) -> Pose2D:
    """Rigid transform ``T`` minimizing ``sum |dst - T(src)|^2`` (no scale)."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) < 2 or len(src) != len(dst):
        raise AssociationError(f"need >= 2 associated pairs, got {min(len(src), len(dst))}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(2)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[1, 1] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return Pose2D(t[0], t[1], math.atan2(R[1, 0], R[0, 0]))


def apply_alignment(traj: Trajectory, T: Pose2D) -> Trajectory:
    xy = traj.positions[:, :2] @ rot2(T.yaw).T + T.t
    yaw = wrap_angle(traj.yaws + T.yaw)
    out = Trajectory.from_xyyaw(traj.stamps, np.column_stack([xy, yaw]))
    out.positions[:, 2] = traj.positions[:, 2]
    return out


def umeyama_align_2d(estimate: Trajectory, truth: Trajectory, max_gap: float = 0.05):
    """Returns ``(aligned estimate, alignment transform)``."""
    ei, ti = associate(estimate, truth, max_gap)
    T = umeyama_2d(estimate.positions[ei, :2], truth.positions[ti, :2])
    return apply_alignment(estimate, T), T


@dataclass(frozen=True)
class TrajectoryErrorReport:
    ate: float  # m
    are: float  # degrees
    n_pairs: int
    alignment: tuple = (0.0, 0.0, 0.0)
    max_error: float = 0.0

    def summary(self) -> str:
        return f"ATE {self.ate:.4f} m  ARE {self.are:.4f} deg  pairs {self.n_pairs}"


def compute_ate_are(aligned: Trajectory, truth: Trajectory, max_gap: float = 0.05,
                    alignment: Pose2D | None = None) -> TrajectoryErrorReport:
    ei, ti = associate(aligned, truth, max_gap)
    if len(ei) == 0:
        raise AssociationError("no associated poses")
    d = np.linalg.norm(aligned.positions[ei, :2] - truth.positions[ti, :2], axis=1)
    dyaw = np.degrees(wrap_angle(aligned.yaws[ei] - truth.yaws[ti]))
    a = (0.0, 0.0, 0.0) if alignment is None else (alignment.x, alignment.y, math.degrees(alignment.yaw))
    return TrajectoryErrorReport(float(np.sqrt(np.mean(d ** 2))), float(np.sqrt(np.mean(dyaw ** 2))),
                                 len(ei), a, float(d.max()))


def evaluate_trajectory(estimate: Trajectory, truth: Trajectory, max_gap: float = 0.05) -> TrajectoryErrorReport:
    aligned, T = umeyama_align_2d(estimate, truth, max_gap)
    return compute_ate_are(aligned, truth, max_gap, T)


def position_errors(estimate: Trajectory, truth: Trajectory, max_gap: float = 0.05) -> np.ndarray:
    """(x, y, err) rows of the aligned estimate, for error-coloured track plots."""
    aligned, _ = umeyama_align_2d(estimate, truth, max_gap)
    ei, ti = associate(aligned, truth, max_gap)
    err = np.linalg.norm(aligned.positions[ei, :2] - truth.positions[ti, :2], axis=1)
    return np.column_stack([aligned.positions[ei, :2], err])


def success_check(trans_err: float, rot_err: float) -> bool:
    """Strict gate: below 2 m and below 5 degrees."""
    if trans_err < 0 or rot_err < 0:
        raise ValueError("errors must be non-negative")
    return trans_err < MAX_TRANS_ERR and rot_err < MAX_ROT_ERR


def pose_errors(estimate: Pose2D, truth: Pose2D) -> tuple[float, float]:
    """(translation error m, |yaw error| degrees)."""
    return (float(math.hypot(estimate.x - truth.x, estimate.y - truth.y)),
            float(abs(math.degrees(wrap_angle(estimate.yaw - truth.yaw)))))


@dataclass
class MatchingSample:
    index: int
    frame: int
    applied: tuple  # distortion (x, y, yaw deg)
    trans_err: float
    rot_err: float
    success: bool
    registered: bool
    n_matches: int
    n_inliers: int


@dataclass
class MatchingEvalReport:
    samples: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def success_rate(self) -> float:
        return 100.0 * sum(s.success for s in self.samples) / self.n if self.n else 0.0

    def _mean(self, attr: str, only_success: bool) -> float:
        vals = [getattr(s, attr) for s in self.samples if s.success or not only_success]
        vals = [v for v in vals if math.isfinite(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_trans_err(self) -> float:
        """Mean over all samples with a registration result."""
        return self._mean("trans_err", False)

    @property
    def mean_rot_err(self) -> float:
        return self._mean("rot_err", False)

    @property
    def mean_trans_err_success(self) -> float:
        return self._mean("trans_err", True)

    @property
    def mean_rot_err_success(self) -> float:
        return self._mean("rot_err", True)

    def summary(self) -> dict:
        return {
            "samples": self.n,
            "success_rate_pct": self.success_rate,
            "mean_trans_err_all_m": self.mean_trans_err,
            "mean_rot_err_all_deg": self.mean_rot_err,
            "mean_trans_err_success_m": self.mean_trans_err_success,
            "mean_rot_err_success_deg": self.mean_rot_err_success,
        }

    def to_lines(self) -> list[str]:
        """One JSON record per sample followed by the summary record."""
        lines = [json.dumps(asdict(s), sort_keys=True) for s in self.samples]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return lines


# -- matching evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class DistortionConfig:
    """Random query distortion: yaw uniform in [-max_rotation, max_rotation) degrees,
    translation uniform in (-max_translation, max_translation) metres per axis."""

    max_rotation: float = 180.0
    max_translation: float = 20.0


def sample_query_frames(positions, n: int, min_spacing: float = 1.0, seed: int = 0,
                        warmup: float = 10.0) -> np.ndarray:
    """Indices of ``n`` frames (sorted) drawn from a subsequence spaced at least ``min_spacing`` apart.

    Frames within the first ``warmup`` metres of travel are skipped: the grid
    has not accumulated enough returns yet.
    """
    xy = np.asarray(positions, dtype=float)[:, :2]
    if len(xy) == 0:
        raise ValueError("no frames to sample queries from")
    travel = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    start = int(np.searchsorted(travel, warmup)) if travel[-1] > warmup else 0
    kept = [start]
    for i in range(start + 1, len(xy)):
        if np.linalg.norm(xy[i] - xy[kept[-1]]) >= min_spacing:
            kept.append(i)
    kept = np.asarray(kept)
    rng = np.random.default_rng(seed)
    if n >= len(kept):
        return kept
    return np.sort(rng.choice(kept, size=n, replace=False))


def distortion_for(sample: int, seed: int, cfg: DistortionConfig) -> tuple[float, float, float]:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, sample])
    yaw = math.radians(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    tx, ty = rng.uniform(-cfg.max_translation, cfg.max_translation, 2)
    return float(tx), float(ty), float(wrap_angle(yaw))


def distort_bev(img, yaw: float, shift):
    """Rotate ``img`` by ``yaw`` about its centre and shift it by ``shift`` metres.

    A world point p appears in the result at ``R (p - c) + c + shift``; returns
    ``(distorted image, D)`` with D that map as a Pose2D.
    """
    import cv2

    from .bev import BevImage

    h, w = img.shape
    res = img.resolution
    c = img.center_world
    cc = (c - np.asarray(img.origin)) / res - 0.5
    Rt = rot2(yaw).T
    # destination pixel -> source pixel
    M = np.hstack([Rt, (cc - Rt @ cc)[:, None]]).astype(np.float64)
    flags = cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP

    def warp(a):
        return cv2.warpAffine(np.ascontiguousarray(a, dtype=np.float32), M, (w, h), flags=flags,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0.0).astype(np.float64)

    mask = warp(img.mask.astype(np.float32)) >= 0.999
    chans = [np.where(mask, warp(ch), 0.0) for ch in (img.intensity, img.slope, img.variance)]
    origin = (img.origin[0] + shift[0], img.origin[1] + shift[1])
    R = rot2(yaw)
    t = c + np.asarray(shift, dtype=float) - R @ c
    return BevImage(*chans, mask, res, origin, img.stamp), Pose2D(t[0], t[1], yaw)


def matching_eval(prior, queries, distortion: DistortionConfig = DistortionConfig(), seed: int = 0,
                  settings=None, n_samples: int | None = None, index=None) -> MatchingEvalReport:
    """Distort each query BEV image, register it against the map and score the recovery.

    ``queries`` is a sequence of ``(frame_index, BevImage)`` in map coordinates.
    Positional gating is off (the distortion range defeats any prior); the map
    keypoints come from a square around the distorted query centre that covers
    every admissible shift.  A failed registration scores the identity estimate.
    """
    from .pipeline import FrameRegistrar, MapFeatureIndex, PipelineSettings
    from .kdtree import KDTree
    from .matching import match_descriptors
    from .registration import estimate_se2

    queries = list(queries)
    if not queries:
        raise ValueError("matching evaluation needs at least one query frame")
    settings = settings or PipelineSettings()
    index = index or MapFeatureIndex(prior, settings.extractor(), settings.map_tile, settings.map_margin)
    reg = FrameRegistrar(settings, index)
    n_samples = len(queries) if n_samples is None else n_samples
    report = MatchingEvalReport()
    for k in range(n_samples):
        frame, img = queries[k % len(queries)]
        tx, ty, yaw = distortion_for(k, seed, distortion)
        dimg, D = distort_bev(img, yaw, (tx, ty))
        G = D.inverse()
        q = reg.query_features(dimg)
        h, w = img.shape
        half = max(h, w) * img.resolution / 2 + math.sqrt(2) * distortion.max_translation
        mf = index.crop(dimg.center_world, half)
        est, n_matches, n_in, ok = Pose2D(), 0, 0, False
        if len(q) and len(mf):
            tree = KDTree(mf.descriptors, max_leaf_visits=settings.leaf_visits)
            ms = match_descriptors(q, mf, reg.state.max_feature_distance, tree=tree, ratio=settings.ratio)
            n_matches = len(ms)
            res = estimate_se2(ms, settings.registration)
            if res.success:
                est, n_in, ok = res.transform, res.n_inliers, True
        cq = dimg.center_world
        te = float(np.linalg.norm(se2_apply_pose(est, cq) - se2_apply_pose(G, cq)))
        re = float(abs(math.degrees(wrap_angle(est.yaw - G.yaw))))
        report.samples.append(MatchingSample(k, int(frame), (tx, ty, math.degrees(yaw)), te, re,
                                             ok and success_check(te, re), ok, n_matches, n_in))
    return report


def se2_apply_pose(T: Pose2D, p) -> np.ndarray:
    return rot2(T.yaw) @ np.asarray(p, dtype=float) + T.t
