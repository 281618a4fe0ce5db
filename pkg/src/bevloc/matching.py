"""Descriptor matching, positional gating and threshold hysteresis."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .features import FeatureSet
from .geometry import Pose2D, se2_apply
from .kdtree import KDTree


@dataclass(eq=False)
class MatchSet:
    """Correspondences as parallel arrays.

    ``query_uv``/``map_uv`` are raster positions (col, row); ``query_xy``/``map_xy``
    the corresponding world positions in metres (query and map frame).
    """

    query_idx: np.ndarray
    map_idx: np.ndarray
    distance: np.ndarray
    query_uv: np.ndarray
    map_uv: np.ndarray
    query_xy: np.ndarray
    map_xy: np.ndarray
    resolution: float = 0.33
    candidates_examined: int = 0
    radius: float = math.inf

    def __post_init__(self):
        self.query_idx = np.asarray(self.query_idx, dtype=np.int64).reshape(-1)
        n = len(self.query_idx)
        self.map_idx = np.asarray(self.map_idx, dtype=np.int64).reshape(n)
        self.distance = np.asarray(self.distance, dtype=np.float64).reshape(n)
        for name in ("query_uv", "map_uv", "query_xy", "map_xy"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(n, 2))

    def __len__(self) -> int:
        return len(self.query_idx)

    def subset(self, keep) -> "MatchSet":
        keep = np.asarray(keep)
        return MatchSet(self.query_idx[keep], self.map_idx[keep], self.distance[keep],
                        self.query_uv[keep], self.map_uv[keep], self.query_xy[keep],
                        self.map_xy[keep], self.resolution, self.candidates_examined, self.radius)

    def displacement_px(self, prior: Pose2D | None = None) -> np.ndarray:
        """Distance in pixels between map keypoints and query keypoints under ``prior``."""
        q = self.query_xy if prior is None else se2_apply(prior, self.query_xy)
        return np.linalg.norm(self.map_xy - q, axis=1) / self.resolution

    @classmethod
    def from_points(cls, query_xy, map_xy, resolution: float = 0.33) -> "MatchSet":
        """Correspondences given directly as world positions (used by tests and benchmarks)."""
        q = np.asarray(query_xy, dtype=float).reshape(-1, 2)
        m = np.asarray(map_xy, dtype=float).reshape(-1, 2)
        if len(q) != len(m):
            raise ValueError(f"query and map differ in length: {len(q)} vs {len(m)}")
        idx = np.arange(len(q))
        return cls(idx, idx, np.zeros(len(q)), q / resolution, m / resolution, q, m, resolution)

    @classmethod
    def empty(cls, resolution: float = 0.33) -> "MatchSet":
        z = np.zeros((0, 2))
        return cls([], [], [], z, z, z, z, resolution)


def match_descriptors(query: FeatureSet, map_features: FeatureSet, max_dist: float,
                      tree: KDTree | None = None, ratio: float | None = None,
                      max_leaf_visits: int = 64) -> MatchSet:
    """Approximate nearest map descriptor for every query descriptor.

    Pairs farther than ``max_dist`` are dropped.  With ``ratio`` set, a pair is
    also dropped unless best < ratio * second best.
    """
    res = query.resolution
    if len(query) == 0 or len(map_features) == 0:
        return MatchSet.empty(res)
    if tree is None:
        tree = KDTree(map_features.descriptors, max_leaf_visits=max_leaf_visits)
    k = 2 if ratio is not None else 1
    dist, ind, examined = tree.query(query.descriptors, k=k)
    keep = (ind[:, 0] >= 0) & (dist[:, 0] <= max_dist)
    if ratio is not None:
        keep &= ~(dist[:, 1] * ratio <= dist[:, 0])
    qi = np.flatnonzero(keep)
    mi = ind[qi, 0]
    return MatchSet(qi, mi, dist[qi, 0], query.uv[qi], map_features.uv[mi],
                    query.world_xy()[qi], map_features.world_xy()[mi], res,
                    int(examined.sum()))


def filter_by_radius(matches: MatchSet, radius: float, resolution: float | None = None,
                     prior: Pose2D | None = None) -> MatchSet:
    """Keep pairs whose displacement (pixels x resolution) is within ``radius`` metres."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    res = matches.resolution if resolution is None else resolution
    if math.isinf(radius):
        out = matches.subset(np.arange(len(matches)))
    else:
        out = matches.subset(matches.displacement_px(prior) * res <= radius)
    out.radius = radius
    return out


@dataclass
class MatcherState:
    """Adaptive matching thresholds and the history of measured pose offsets."""

    max_feature_distance: float = 0.7
    max_keypoints: int = 1000
    distance_bounds: tuple = (0.3, 1.2)
    keypoint_bounds: tuple = (200, 2000)
    high_watermark: int = 3000
    low_watermark: int = 300
    factor: float = 0.9
    r_min: float = 1.0
    r_max: float = 20.0
    r_floor: float = 2.0
    history: int = 10
    recent_offsets: deque = field(default=None)

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("hysteresis factor must lie in (0, 1)")
        if self.low_watermark > self.high_watermark:
            raise ValueError("low watermark above high watermark")
        self.recent_offsets = deque(self.recent_offsets or (), maxlen=self.history)
        self.max_feature_distance = float(np.clip(self.max_feature_distance, *self.distance_bounds))
        self.max_keypoints = int(np.clip(self.max_keypoints, *self.keypoint_bounds))

    def record_offset(self, offset_m: float) -> None:
        self.recent_offsets.append(abs(float(offset_m)))

    def copy(self) -> "MatcherState":
        c = MatcherState(**{k: getattr(self, k) for k in self.__dataclass_fields__ if k != "recent_offsets"})
        c.recent_offsets.extend(self.recent_offsets)
        return c


def dynamic_radius(state: MatcherState) -> float:
    if not state.recent_offsets:
        return float(state.r_max)
    med = float(np.median(np.abs(np.asarray(state.recent_offsets, dtype=float))))
    return float(np.clip(3.0 * med + state.r_floor, state.r_min, state.r_max))


def update_hysteresis(state: MatcherState, match_count: int) -> MatcherState:
    """Tighten above the high watermark, loosen below the low one, else keep."""
    new = state.copy()
    if match_count > state.high_watermark:
        scale = state.factor
    elif match_count < state.low_watermark:
        scale = 1.0 / state.factor
    else:
        return new
    new.max_feature_distance = float(np.clip(state.max_feature_distance * scale, *state.distance_bounds))
    new.max_keypoints = int(np.clip(round(state.max_keypoints * scale), *state.keypoint_bounds))
    return new


class DescriptorMatcher(BaseEstimator):
    """``fit(map_features)`` builds the index; ``match(query)`` returns a MatchSet."""

    def __init__(self, max_dist=0.7, leaf_size=16, max_leaf_visits=64, ratio=None):
        self.max_dist = max_dist
        self.leaf_size = leaf_size
        self.max_leaf_visits = max_leaf_visits
        self.ratio = ratio

    def fit(self, map_features: FeatureSet, y=None):
        self.map_features_ = map_features
        self.tree_ = KDTree(map_features.descriptors, self.leaf_size, self.max_leaf_visits)
        return self

    def kneighbors(self, X, n_neighbors: int = 1):
        dist, ind, _ = self.tree_.query(X, k=n_neighbors)
        return dist, ind

    def match(self, query: FeatureSet, max_dist: float | None = None) -> MatchSet:
        return match_descriptors(query, self.map_features_,
                                 self.max_dist if max_dist is None else max_dist,
                                 tree=self.tree_, ratio=self.ratio)
