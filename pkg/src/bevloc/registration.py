"""Robust SE(2) estimation from contaminated 2D correspondences.

Decoupled estimator in the style of TEASER/Quatro, specialised to the plane:

1. translation-invariant measurements (TIMs) ``(m_j - m_i, q_j - q_i)`` over a
   seeded sparse pair graph; pairs whose lengths disagree by more than
   ``2 * noise_bound`` cannot both be inliers and are pruned, as are TIMs
   shorter than ``4 * noise_bound`` (their angle is noise dominated);
2. yaw by graduated non-convexity over a truncated least squares cost on the
   wrapped angle residuals, each TIM with bound ``eps_k = 2 noise_bound / |TIM|``;
3. translation by per-axis adaptive voting on ``m - R q``;
4. a rigid least-squares refinement on the inlier set (residual <= noise_bound).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import Pose2D, rot2, se2_apply, wrap_angle
from .matching import MatchSet
from .utils.validation import check_paired


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationParams:
    noise_bound: float = 0.66
    kappa: float = 1.39
    c_bar: float = 0.5
    max_iterations: int = 100
    min_inliers: int = 6
    seed: int = 0
    estimator: str = "gnc"
    full_graph_max: int = 100
    ransac_iterations: int = 2000

    def __post_init__(self):
        if self.noise_bound <= 0:
            raise ValueError("noise_bound must be positive")
        if self.kappa <= 1:
            raise ValueError("kappa must exceed 1")
        if self.c_bar <= 0:
            raise ValueError("c_bar must be positive")
        if self.estimator not in ("gnc", "ransac"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass(eq=False)
class RegistrationResult:
    """``transform`` maps query coordinates into the map frame."""

    transform: Pose2D
    inliers: np.ndarray
    mean_residual: float
    success: bool
    n_tims: int = 0
    message: str = ""
    yaw_weights: np.ndarray = field(default=None, repr=False)

    @property
    def n_inliers(self) -> int:
        return len(self.inliers)

    @classmethod
    def failure(cls, message: str, n_tims: int = 0) -> "RegistrationResult":
        return cls(Pose2D(), np.zeros(0, dtype=np.int64), math.inf, False, n_tims, message)


@dataclass(eq=False)
class TimSet:
    i: np.ndarray
    j: np.ndarray
    d_query: np.ndarray
    d_map: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


def _pairs(n: int, n_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    total = n * (n - 1) // 2
    if n_pairs >= total:
        i, j = np.triu_indices(n, k=1)
        return i.astype(np.int64), j.astype(np.int64)
    # sample distinct pairs by rank in the upper triangle
    ranks = np.sort(rng.choice(total, size=n_pairs, replace=False))
    # row i holds ranks [i*n - i(i+1)/2, ...) ; invert with the quadratic formula
    i = np.floor(((2 * n - 1) - np.sqrt((2 * n - 1) ** 2 - 8 * ranks)) / 2).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    over = ranks >= start + (n - 1 - i)
    i[over] += 1
    start = i * n - i * (i + 1) // 2
    j = ranks - start + i + 1
    return i, j.astype(np.int64)


def build_tims(query_xy, map_xy, seed: int = 0, n_pairs: int | None = None) -> TimSet:
    """TIMs over ``K = min(4N, N(N-1)/2)`` seeded random index pairs (or ``n_pairs``)."""
    q, m = check_paired(query_xy, map_xy)
    n = len(q)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 matches to build TIMs, got {n}")
    k = min(4 * n, n * (n - 1) // 2) if n_pairs is None else min(int(n_pairs), n * (n - 1) // 2)
    i, j = _pairs(n, k, np.random.default_rng(seed))
    return TimSet(i, j, q[j] - q[i], m[j] - m[i])


def _tls_gnc_weights(r2: np.ndarray, mu: float, cbar2: float) -> np.ndarray:
    th1 = (mu + 1.0) / mu * cbar2
    th2 = mu / (mu + 1.0) * cbar2
    w = np.empty_like(r2)
    lo = r2 <= th2
    hi = r2 >= th1
    mid = ~(lo | hi)
    w[lo] = 1.0
    w[hi] = 0.0
    w[mid] = np.sqrt(cbar2 * mu * (mu + 1.0) / r2[mid]) - mu
    return np.clip(w, 0.0, 1.0)


def solve_rotation_gnc(tims: TimSet, params: RegistrationParams = RegistrationParams()):
    """Yaw minimising a truncated least squares cost over TIM angle residuals.

    Returns ``(yaw, weights, used)``: ``weights`` are the final GNC weights of
    the usable TIMs, ``used`` their indices into ``tims``.  ``yaw`` is None when
    no TIM is usable.
    """
    nb = params.noise_bound
    len_q = np.linalg.norm(tims.d_query, axis=1)
    len_m = np.linalg.norm(tims.d_map, axis=1)
    used = np.flatnonzero((np.minimum(len_q, len_m) > 4 * nb) & (np.abs(len_q - len_m) <= 2 * nb))
    if len(used) == 0:
        return None, np.zeros(0), used
    dq, dm = tims.d_query[used], tims.d_map[used]
    phi = np.arctan2(dm[:, 1], dm[:, 0]) - np.arctan2(dq[:, 1], dq[:, 0])
    eps = 2.0 * nb / np.minimum(len_q[used], len_m[used])
    inv_eps2 = 1.0 / (eps * eps)
    cbar2 = params.c_bar ** 2

    def weighted_yaw(w, start=None):
        # circular mean: unbiased under uniformly spread outlier angles
        if start is None:
            return math.atan2(float(np.sum(w * inv_eps2 * np.sin(phi))),
                              float(np.sum(w * inv_eps2 * np.cos(phi))))
        yaw = start
        for _ in range(3):
            r = wrap_angle(phi - yaw)
            sw = float(np.sum(w * inv_eps2))
            if sw <= 0:
                break
            yaw = wrap_angle(yaw + float(np.sum(w * inv_eps2 * r)) / sw)
        return yaw

    w = np.ones(len(used))
    yaw = weighted_yaw(w)
    r2 = (wrap_angle(phi - yaw) / eps) ** 2
    max_r2 = float(r2.max())
    if max_r2 <= cbar2:
        return weighted_yaw(w, yaw), w, used
    mu = 1.0 / (2.0 * max_r2 / cbar2 - 1.0)
    prev_cost = math.inf
    for _ in range(params.max_iterations):
        w = _tls_gnc_weights(r2, mu, cbar2)
        if w.sum() == 0:
            break
        yaw = weighted_yaw(w, yaw)
        r2 = (wrap_angle(phi - yaw) / eps) ** 2
        cost = float(np.sum(w * r2))
        binary = np.all((w == 0) | (w == 1))
        if binary or abs(cost - prev_cost) < 1e-12:
            break
        prev_cost = cost
        mu *= params.kappa
    # final hard truncation
    w = (r2 <= cbar2).astype(float)
    if w.sum() > 0:
        yaw = weighted_yaw(w, yaw)
    return yaw, w, used


def adaptive_voting(values: np.ndarray, bound: float) -> tuple[float, np.ndarray]:
    """Scalar maximum consensus: the largest set of values within one interval of width 2*bound.

    Sweeps the sorted interval endpoints; the densest stretch wins, ties go to
    the first stretch found.  Returns (mean of the consensus set, member mask).
    """
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, np.zeros(0, dtype=bool)
    # event sweep over [v - b, v + b] interval endpoints; entries before exits at equal positions
    pos = np.concatenate([v - bound, v + bound])
    kind = np.concatenate([np.zeros(len(v), int), np.ones(len(v), int)])
    order = np.lexsort((kind, pos))
    depth = np.cumsum(np.where(kind[order] == 0, 1, -1))
    k = int(np.argmax(depth))
    centre = pos[order][k]
    members = np.abs(v - centre) <= bound + 1e-12
    # centre is the left edge of the densest stretch; move it onto the members
    est = float(v[members].mean())
    members = np.abs(v - est) <= bound + 1e-12
    if members.any():
        est = float(v[members].mean())
    return est, members


def solve_translation(query_xy, map_xy, yaw: float, params: RegistrationParams = RegistrationParams()):
    """Per-axis consensus on ``m - R(yaw) q``; inliers have 2D residual <= noise_bound."""
    q, m = check_paired(query_xy, map_xy)
    diff = m - q @ rot2(yaw).T
    tx, _ = adaptive_voting(diff[:, 0], params.noise_bound)
    ty, _ = adaptive_voting(diff[:, 1], params.noise_bound)
    t = np.array([tx, ty])
    inliers = np.flatnonzero(np.linalg.norm(diff - t, axis=1) <= params.noise_bound)
    return t, inliers


def rigid_fit_2d(query_xy, map_xy) -> Pose2D:
    """Least-squares rotation and translation mapping query onto map (no scale)."""
    q, m = check_paired(query_xy, map_xy)
    qc, mc = q.mean(axis=0), m.mean(axis=0)
    h = (q - qc).T @ (m - mc)
    yaw = math.atan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
    t = mc - rot2(yaw) @ qc
    return Pose2D(float(t[0]), float(t[1]), yaw)


def _residuals(pose: Pose2D, q: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.linalg.norm(m - se2_apply(pose, q), axis=1)


def _refine(pose: Pose2D, q, m, nb: float, rounds: int = 3):
    inl = np.flatnonzero(_residuals(pose, q, m) <= nb)
    for _ in range(rounds):
        if len(inl) < 2:
            break
        cand = rigid_fit_2d(q[inl], m[inl])
        cand_inl = np.flatnonzero(_residuals(cand, q, m) <= nb)
        if len(cand_inl) < len(inl):
            break
        same = np.array_equal(cand_inl, inl)
        pose, inl = cand, cand_inl
        if same:
            break
    return pose, inl


def _finish(pose: Pose2D, q, m, params: RegistrationParams, n_tims: int, weights=None) -> RegistrationResult:
    pose, inl = _refine(pose, q, m, params.noise_bound)
    res = _residuals(pose, q, m)
    mean_res = float(res[inl].mean()) if len(inl) else math.inf
    ok = len(inl) >= params.min_inliers
    msg = "" if ok else f"{len(inl)} inliers < {params.min_inliers}"
    return RegistrationResult(pose, inl, mean_res, ok, n_tims, msg, weights)


def _ransac(q, m, params: RegistrationParams) -> RegistrationResult:
    n = len(q)
    rng = np.random.default_rng(params.seed)
    best_pose, best_count = None, -1
    for _ in range(params.ransac_iterations):
        i, j = rng.choice(n, size=2, replace=False)
        dq, dm = q[j] - q[i], m[j] - m[i]
        if np.linalg.norm(dq) < 4 * params.noise_bound:
            continue
        yaw = math.atan2(dm[1], dm[0]) - math.atan2(dq[1], dq[0])
        t = m[i] - rot2(yaw) @ q[i]
        pose = Pose2D(float(t[0]), float(t[1]), yaw)
        count = int((_residuals(pose, q, m) <= params.noise_bound).sum())
        if count > best_count:
            best_pose, best_count = pose, count
    if best_pose is None:
        return RegistrationResult.failure("no usable minimal sample")
    return _finish(best_pose, q, m, params, 0)


def estimate_se2(matches, params: RegistrationParams = RegistrationParams(), map_xy=None) -> RegistrationResult:
    """Map-from-query SE(2) transform from a MatchSet (or query/map point arrays)."""
    if isinstance(matches, MatchSet):
        q, m = matches.query_xy, matches.map_xy
    else:
        q, m = check_paired(matches, map_xy)
    n = len(q)
    if n < 2:
        return RegistrationResult.failure(f"{n} matches")
    if params.estimator == "ransac":
        return _ransac(q, m, params)
    n_pairs = n * (n - 1) // 2 if n <= params.full_graph_max else None
    tims = build_tims(q, m, params.seed, n_pairs)
    yaw, weights, used = solve_rotation_gnc(tims, params)
    if yaw is None:
        return RegistrationResult.failure("no usable TIMs", len(tims))
    t, _ = solve_translation(q, m, yaw, params)
    return _finish(Pose2D(float(t[0]), float(t[1]), yaw), q, m, params, len(tims), weights)


class Se2Registrar(BaseEstimator):
    """sklearn-style wrapper: ``fit(query_xy, map_xy)`` then ``predict(query_xy)``."""

    def __init__(self, noise_bound=0.66, kappa=1.39, c_bar=0.5, max_iterations=100, min_inliers=6,
                 seed=0, estimator="gnc", full_graph_max=100):
        self.noise_bound = noise_bound
        self.kappa = kappa
        self.c_bar = c_bar
        self.max_iterations = max_iterations
        self.min_inliers = min_inliers
        self.seed = seed
        self.estimator = estimator
        self.full_graph_max = full_graph_max

    def _params(self) -> RegistrationParams:
        return RegistrationParams(**self.get_params())

    def fit(self, X, y=None):
        res = estimate_se2(X, self._params(), map_xy=y)
        self.result_ = res
        self.transform_ = res.transform
        self.inliers_ = res.inliers
        self.success_ = res.success
        return self

    def predict(self, X) -> np.ndarray:
        return se2_apply(self.transform_, np.asarray(X, dtype=float))
