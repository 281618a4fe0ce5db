"""World-fixed, sensor-centred grid of per-cell ground statistics.

The segmenter is a deliberately small, documented stand-in for a full ground
segmentation method.  Per frame and per cell:

* the cell height estimate is the minimum z of the cell's points; the z-spread
  of its lowest ``v_np`` points must not exceed ``h_g``;
* that height must lie within ``o_minc`` of the median of the 8 neighbouring
  cell heights, and no more than ``h_g + tan(theta) * d`` above the lowest
  cell height inside the ``obstacle_window`` square, ``d`` being the distance
  to the window corner (rejects roofs of cars and other obstacle tops);
* once a cell's ground confidence reaches 0.5, that height must also lie no
  more than ``h_o`` above the accumulated ground height (rejects transient
  objects covering ground seen before);
* points of an accepted cell up to ``h_o`` above its height are ground.

Ground points are accumulated into running count-weighted means (intensity,
height) and a merged z variance.  Ground confidence is
``clamp(n_ground / (2 v_np), 0, 1) * clamp(1 - |h - median8(h)| / o_minc, 0, 1)``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .config import SegmenterConfig
from .geometry import PointCloud, Pose3D

GROUND = 1
NON_GROUND = 0
OUT_OF_GRID = -1

KNOWN_GROUND_CONFIDENCE = 0.5


@dataclass(frozen=True)
class GridCell:
    intensity_mean: float
    intensity_weight: float
    ground_height: float
    height_variance: float
    point_count: int
    ground_confidence: float
    slope_min: Optional[float]


def merge_moments(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    """Combine (count, mean, sum of squared deviations) of two samples.

    Works element-wise on arrays; empty sides (count 0) are handled.
    """
    n_a = np.asarray(n_a, dtype=float)
    n_b = np.asarray(n_b, dtype=float)
    n = n_a + n_b
    safe = np.where(n > 0, n, 1.0)
    delta = np.asarray(mean_b, dtype=float) - mean_a
    mean = np.where(n > 0, mean_a + delta * n_b / safe, 0.0)
    m2 = np.where(n > 0, m2_a + m2_b + delta * delta * n_a * n_b / safe, 0.0)
    return n, mean, m2


def _masked_median(values: np.ndarray) -> np.ndarray:
    """Row-wise median of an (N, K) array ignoring NaN; NaN for empty rows."""
    srt = np.sort(values, axis=1)
    k = np.isfinite(srt).sum(axis=1)
    lo = np.clip((k - 1) // 2, 0, values.shape[1] - 1)
    hi = np.clip(k // 2, 0, values.shape[1] - 1)
    rows = np.arange(len(values))
    med = 0.5 * (srt[rows, lo] + srt[rows, hi])
    return np.where(k > 0, med, np.nan)


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _neighbour_values(field: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    padded = np.pad(field, 1, constant_values=np.nan)
    return np.stack([padded[rows + 1 + dr, cols + 1 + dc] for dr, dc in _NEIGHBOURS], axis=1)


def _scroll(arr: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """Content at [r, c] moves to [r - dr, c - dc]; exposed cells get ``fill``."""
    out = np.full_like(arr, fill)
    n_r, n_c = arr.shape
    if abs(dr) >= n_r or abs(dc) >= n_c:
        return out
    src_r = slice(max(dr, 0), n_r + min(dr, 0))
    dst_r = slice(max(-dr, 0), n_r + min(-dr, 0))
    src_c = slice(max(dc, 0), n_c + min(dc, 0))
    dst_c = slice(max(-dc, 0), n_c + min(-dc, 0))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


class GroundGridMap:
    """Square grid of ``grid_size`` cells whose cells are fixed in the world.

    Arrays are indexed ``[row, col]`` with rows along +y and columns along +x;
    cell ``[0, 0]`` has its lower-left corner at ``origin``.
    """

    _FIELDS = {
        "point_count": 0,
        "intensity_weight": 0.0,
        "intensity_mean": 0.0,
        "ground_height": 0.0,
        "height_m2": 0.0,
        "ground_confidence": 0.0,
        "slope_min": np.nan,
    }

    def __init__(self, config: SegmenterConfig | None = None, center=(0.0, 0.0)):
        self.config = config or SegmenterConfig()
        s = self.config.grid_size
        for name, fill in self._FIELDS.items():
            dtype = np.int64 if name == "point_count" else np.float64
            setattr(self, name, np.full((s, s), fill, dtype=dtype))
        self.origin_index = self._origin_for(center)

    @property
    def size(self) -> int:
        return self.config.grid_size

    @property
    def cell_size(self) -> float:
        return self.config.cell_size

    @property
    def origin(self) -> tuple[float, float]:
        return (self.origin_index[0] * self.cell_size, self.origin_index[1] * self.cell_size)

    @property
    def center_cell(self) -> tuple[int, int]:
        c = self.size // 2
        return (c, c)

    @property
    def height_variance(self) -> np.ndarray:
        w = self.intensity_weight
        return np.where(w > 0, self.height_m2 / np.where(w > 0, w, 1.0), 0.0)

    def _origin_for(self, position) -> tuple[int, int]:
        cs = self.cell_size
        half = self.size // 2
        return (int(math.floor(position[0] / cs)) - half, int(math.floor(position[1] / cs)) - half)

    def copy(self) -> "GroundGridMap":
        return copy.deepcopy(self)

    # -- operations -----------------------------------------------------------------

    def recenter(self, sensor_position) -> "GroundGridMap":
        new = self._origin_for(sensor_position)
        dc = new[0] - self.origin_index[0]
        dr = new[1] - self.origin_index[1]
        if dc == 0 and dr == 0:
            return self
        for name, fill in self._FIELDS.items():
            setattr(self, name, _scroll(getattr(self, name), dr, dc, fill))
        self.origin_index = new
        return self

    def world_to_cell(self, xy) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=float)
        cs = self.cell_size
        col = np.floor(xy[..., 0] / cs).astype(np.int64) - self.origin_index[0]
        row = np.floor(xy[..., 1] / cs).astype(np.int64) - self.origin_index[1]
        return row, col

    def integrate_scan(self, cloud: PointCloud, sensor_pose: Pose3D) -> np.ndarray:
        """Segment ``cloud`` and accumulate its ground points.

        Returns per-point labels: GROUND, NON_GROUND or OUT_OF_GRID.
        """
        cfg = self.config
        s = self.size
        n_pts = len(cloud)
        labels = np.full(n_pts, OUT_OF_GRID, dtype=np.int8)
        if n_pts == 0:
            return labels
        world = cloud.xyz.astype(np.float64) @ sensor_pose.rotation_matrix().T + sensor_pose.position
        intensity = cloud.intensity.astype(np.float64)
        row, col = self.world_to_cell(world[:, :2])
        inside = (row >= 0) & (row < s) & (col >= 0) & (col < s)
        idx = np.flatnonzero(inside)
        if len(idx) == 0:
            return labels
        z = world[idx, 2]
        flat = row[idx] * s + col[idx]

        order = np.lexsort((z, flat))
        flat_s, z_s = flat[order], z[order]
        cells, starts, counts = np.unique(flat_s, return_index=True, return_counts=True)
        h_low = z_s[starts]
        k_low = np.minimum(counts, cfg.v_np)
        spread = z_s[starts + k_low - 1] - h_low

        lowest = np.full(s * s, np.nan)
        lowest[cells] = h_low
        lowest = lowest.reshape(s, s)
        c_rows, c_cols = np.divmod(cells, s)

        nbr_med = _masked_median(_neighbour_values(lowest, c_rows, c_cols))
        nbr_ok = np.isnan(nbr_med) | (np.abs(h_low - np.nan_to_num(nbr_med)) <= cfg.o_minc)

        win = max(1, int(math.ceil(cfg.obstacle_window / cfg.cell_size)))
        floor_map = ndimage.minimum_filter(np.where(np.isnan(lowest), np.inf, lowest),
                                           size=2 * win + 1, mode="constant", cval=np.inf)
        # the window is square, so its farthest cell sits on the diagonal
        allowance = cfg.h_g + math.tan(math.radians(cfg.theta)) * win * cfg.cell_size * math.sqrt(2)
        floor_ok = h_low - floor_map[c_rows, c_cols] <= allowance

        # a cell whose ground is already known rejects a frame whose lowest
        # return sits above it (e.g. the underside of a passing vehicle)
        known = self.ground_confidence.reshape(-1)[cells] >= KNOWN_GROUND_CONFIDENCE
        persist_ok = ~known | (h_low - self.ground_height.reshape(-1)[cells] <= cfg.h_o)

        candidate = (spread <= cfg.h_g) & nbr_ok & floor_ok & persist_ok

        # per sorted point: cell position in `cells`
        cell_pos = np.repeat(np.arange(len(cells)), counts)
        is_ground_s = candidate[cell_pos] & (z_s <= h_low[cell_pos] + cfg.h_o)
        is_ground = np.empty_like(is_ground_s)
        is_ground[order] = is_ground_s
        labels[idx] = np.where(is_ground, GROUND, NON_GROUND)

        self._accumulate(flat, z, intensity[idx], is_ground)
        return labels

    def _accumulate(self, flat, z, intensity, is_ground) -> None:
        s = self.size
        size = s * s
        self.point_count.reshape(-1)[:] += np.bincount(flat, minlength=size)

        g_flat = flat[is_ground]
        if len(g_flat) == 0:
            return
        g_z = z[is_ground]
        g_i = intensity[is_ground]
        n_b = np.bincount(g_flat, minlength=size).astype(float)
        touched = np.flatnonzero(n_b)
        n_b = n_b[touched]
        mean_z = np.bincount(g_flat, weights=g_z, minlength=size)[touched] / n_b
        mean_i = np.bincount(g_flat, weights=g_i, minlength=size)[touched] / n_b
        lookup = np.zeros(size)
        lookup[touched] = mean_z
        m2_b = np.bincount(g_flat, weights=(g_z - lookup[g_flat]) ** 2, minlength=size)[touched]

        w = self.intensity_weight.reshape(-1)
        gh = self.ground_height.reshape(-1)
        m2 = self.height_m2.reshape(-1)
        im = self.intensity_mean.reshape(-1)
        n_a = w[touched]
        n, new_gh, new_m2 = merge_moments(n_a, gh[touched], m2[touched], n_b, mean_z, m2_b)
        im[touched] = (n_a * im[touched] + n_b * mean_i) / n
        gh[touched] = new_gh
        m2[touched] = new_m2
        w[touched] = n
        self._update_confidence(touched)

    def _update_confidence(self, touched: np.ndarray) -> None:
        cfg = self.config
        s = self.size
        heights = np.where(self.intensity_weight > 0, self.ground_height, np.nan)
        rows, cols = np.divmod(touched, s)
        med = _masked_median(_neighbour_values(heights, rows, cols))
        dev = np.abs(heights[rows, cols] - med)
        consistency = np.where(np.isnan(med), 1.0, np.clip(1.0 - dev / cfg.o_minc, 0.0, 1.0))
        support = np.clip(self.intensity_weight[rows, cols] / (2.0 * cfg.v_np), 0.0, 1.0)
        self.ground_confidence[rows, cols] = support * consistency

    def cell_stats(self, u: int, v: int) -> GridCell:
        s = self.size
        if not (0 <= u < s and 0 <= v < s):
            raise IndexError(f"cell ({u}, {v}) outside {s}x{s} grid")
        slope = self.slope_min[u, v]
        return GridCell(
            intensity_mean=float(self.intensity_mean[u, v]),
            intensity_weight=float(self.intensity_weight[u, v]),
            ground_height=float(self.ground_height[u, v]),
            height_variance=float(self.height_variance[u, v]),
            point_count=int(self.point_count[u, v]),
            ground_confidence=float(self.ground_confidence[u, v]),
            slope_min=None if np.isnan(slope) else float(slope),
        )

    def update(self, cloud: PointCloud, sensor_pose: Pose3D) -> np.ndarray:
        """Recenter on the sensor and integrate one scan."""
        self.recenter((sensor_pose.x, sensor_pose.y))
        return self.integrate_scan(cloud, sensor_pose)


def recenter(grid: GroundGridMap, sensor_position) -> GroundGridMap:
    return grid.recenter(sensor_position)


def integrate_scan(grid: GroundGridMap, cloud: PointCloud, sensor_pose: Pose3D):
    labels = grid.integrate_scan(cloud, sensor_pose)
    return grid, labels


def cell_stats(grid: GroundGridMap, u: int, v: int) -> GridCell:
    return grid.cell_stats(u, v)
