"""Three-channel BEV images (intensity, slope, variance) rendered from the ground grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .config import NormalizationFactors
from .ground_grid import GroundGridMap
from .utils.validation import AlignmentError

# raw 1 - cos(tilt) values are tiny; stretch them before the 8-bit clamp
SLOPE_DISPLAY_SCALE = 10.0
CONFIDENCE_GATE = 0.5


@dataclass(eq=False)
class BevImage:
    """Float channels in [0, 1], indexed ``[row, col]`` with rows along +y.

    ``origin`` is the world position of the lower-left corner of pixel [0, 0].
    ``raw_variance`` keeps the un-normalised z variance (m^2) used for map fusion
    and ``count`` the accumulated ground-point count per pixel.
    """

    intensity: np.ndarray
    slope: np.ndarray
    variance: np.ndarray
    mask: np.ndarray
    resolution: float = 0.33
    origin: tuple = (0.0, 0.0)
    stamp: float = 0.0
    raw_variance: Optional[np.ndarray] = field(default=None, repr=False)
    count: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        shape = self.mask.shape
        for name in ("intensity", "slope", "variance"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name} shape {a.shape} != mask shape {shape}")
            setattr(self, name, a)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def channels(self) -> np.ndarray:
        return np.stack([self.intensity, self.slope, self.variance], axis=-1)

    def pixel_to_world(self, uv) -> np.ndarray:
        """Subpixel (u=col, v=row) with pixel centres at integers -> world xy."""
        uv = np.asarray(uv, dtype=float)
        return np.asarray(self.origin) + (uv + 0.5) * self.resolution

    def world_to_pixel(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return (xy - np.asarray(self.origin)) / self.resolution - 0.5

    @property
    def center_world(self) -> np.ndarray:
        h, w = self.shape
        return self.pixel_to_world([(w - 1) / 2.0, (h - 1) / 2.0])

    @classmethod
    def empty(cls, size: int, resolution: float = 0.33, origin=(0.0, 0.0)) -> "BevImage":
        z = np.zeros((size, size))
        return cls(z, z.copy(), z.copy(), np.zeros((size, size), bool), resolution, origin)


@dataclass(eq=False)
class SlopeState:
    """Element-wise minimum of non-zero slope observations, NaN where unset."""

    origin_index: tuple
    values: np.ndarray

    def realign(self, origin_index) -> "SlopeState":
        from .ground_grid import _scroll

        dc = origin_index[0] - self.origin_index[0]
        dr = origin_index[1] - self.origin_index[1]
        return SlopeState(tuple(origin_index), _scroll(self.values, dr, dc, np.nan))


def _axis_gradient(h: np.ndarray, axis: int, step: float) -> np.ndarray:
    """Central differences, one-sided where a neighbour is missing, NaN if both are."""
    pad = [(0, 0), (0, 0)]
    pad[axis] = (1, 1)
    p = np.pad(h, pad, constant_values=np.nan)
    n = h.shape[axis]
    prev = np.take(p, np.arange(0, n), axis=axis)
    nxt = np.take(p, np.arange(2, n + 2), axis=axis)
    central = (nxt - prev) / (2 * step)
    fwd = (nxt - h) / step
    bwd = (h - prev) / step
    g = np.where(np.isfinite(central), central, np.where(np.isfinite(fwd), fwd, bwd))
    return g


def slope_field(heights: np.ndarray, cell_size: float, confidence=None) -> np.ndarray:
    """Per-cell ``1 - N_z / |N|`` from the terrain normal; 0 where ungated or unset.

    ``heights`` holds NaN for cells without a ground estimate.
    """
    h = np.asarray(heights, dtype=float)
    gx = _axis_gradient(h, 1, cell_size)
    gy = _axis_gradient(h, 0, cell_size)
    with np.errstate(invalid="ignore"):
        val = 1.0 - 1.0 / np.sqrt(1.0 + gx * gx + gy * gy)
    ok = np.isfinite(val) & np.isfinite(h)
    if confidence is not None:
        ok &= np.asarray(confidence) > CONFIDENCE_GATE
    return np.where(ok, val, 0.0)


def slope_from_heights(heights, cell_size: float, confidence: float = 1.0) -> float:
    """Slope value of the centre cell of a 3x3 height neighbourhood."""
    h = np.asarray(heights, dtype=float)
    if h.shape != (3, 3):
        raise ValueError("heights must be a 3x3 neighbourhood")
    if not confidence > CONFIDENCE_GATE:
        return 0.0
    return float(slope_field(h, cell_size)[1, 1])


def render_bev(grid: GroundGridMap, factors: NormalizationFactors,
               prev_slope_state: SlopeState | None = None, stamp: float = 0.0):
    """Render one frame's BEV image; returns ``(image, updated slope state)``."""
    if prev_slope_state is None:
        prev_slope_state = SlopeState(grid.origin_index, grid.slope_min.copy())
    elif tuple(prev_slope_state.origin_index) != tuple(grid.origin_index):
        raise AlignmentError(
            f"slope state origin {prev_slope_state.origin_index} != grid origin {grid.origin_index}")

    weight = grid.intensity_weight
    mask = weight > 0
    heights = np.where(mask, grid.ground_height, np.nan)
    obs = slope_field(heights, grid.cell_size, grid.ground_confidence)
    prev = prev_slope_state.values
    state = np.where(obs != 0, np.fmin(prev, np.where(obs != 0, obs, np.nan)), prev)

    raw_var = grid.height_variance
    intensity = np.clip(grid.intensity_mean * factors.I_c, 0.0, 1.0)
    slope = np.clip(np.nan_to_num(state) * factors.S_c * SLOPE_DISPLAY_SCALE, 0.0, 1.0)
    variance = np.clip(raw_var * factors.V_c, 0.0, 1.0)
    img = BevImage(
        intensity=np.where(mask, intensity, 0.0),
        slope=np.where(mask, slope, 0.0),
        variance=np.where(mask, variance, 0.0),
        mask=mask,
        resolution=grid.cell_size,
        origin=grid.origin,
        stamp=stamp,
        raw_variance=np.where(mask, raw_var, 0.0),
        count=np.where(mask, weight, 0.0),
    )
    return img, SlopeState(tuple(grid.origin_index), state)


def quantize(img: BevImage) -> np.ndarray:
    """(H, W, 3) uint8 raster, round half up; masked-out pixels are 0."""
    ch = np.clip(img.channels(), 0.0, 1.0)
    q = np.floor(ch * 255.0 + 0.5).astype(np.uint8)
    q[~img.mask] = 0
    return q


def dequantize(raster: np.ndarray, mask=None, resolution: float = 0.33, origin=(0.0, 0.0)) -> BevImage:
    r = np.asarray(raster)
    f = r.astype(np.float64) / 255.0
    if mask is None:
        mask = r.any(axis=-1)
    return BevImage(f[..., 0], f[..., 1], f[..., 2], mask, resolution, origin)


class BevRenderer(BaseEstimator, TransformerMixin):
    """Stateful renderer keeping the per-world-cell slope minimum across frames.

    ``transform(grid)`` renders a BEV image and updates the slope memory of
    ``grid`` in place.
    """

    def __init__(self, I_c: float = 1.0, S_c: float = 0.1, V_c: float = 0.35):
        self.I_c = I_c
        self.S_c = S_c
        self.V_c = V_c

    def fit(self, X=None, y=None):
        self.factors_ = NormalizationFactors(self.I_c, self.S_c, self.V_c)
        return self

    def transform(self, grid: GroundGridMap, stamp: float = 0.0) -> BevImage:
        if not hasattr(self, "factors_"):
            self.fit()
        img, state = render_bev(grid, self.factors_, stamp=stamp)
        grid.slope_min = state.values
        return img
