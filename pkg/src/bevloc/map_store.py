"""Prior map construction, storage and local crops.

Fusion per map pixel:

* intensity: weighted mean with ``w = min(1 / variance, 1000)`` where the
  variance is the raw z variance in m^2 (before display scaling);
* slope: minimum over non-zero observations;
* variance: mean weighted by the ground-point counts behind each observation.

The accumulator grows in world-aligned 256 x 256 blocks, which become the
GeoTIFF tiles of the finalized map.  Internally maps use the BEV orientation
(row index grows with +y); on disk they are north-up.  Pixel value 0 in all
three bands marks "no data", so valid pixels that would quantize to (0, 0, 0)
are stored with intensity 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .bev import BevImage, dequantize
from .geometry import Pose2D, se2_apply
from .geotiff import GeoReference, GeoTiffReader, write_geotiff

WEIGHT_CAP = 1000.0
TILE = 256


class ResolutionMismatchError(ValueError):
    pass


class EmptyMapError(ValueError):
    pass


def inverse_variance_weight(variance, cap: float = WEIGHT_CAP) -> np.ndarray:
    v = np.asarray(variance, dtype=float)
    with np.errstate(divide="ignore"):
        w = np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), np.inf)
    return np.minimum(w, cap)


def fuse_intensity(values, variances, cap: float = WEIGHT_CAP) -> float:
    w = inverse_variance_weight(variances, cap)
    return float(np.sum(w * np.asarray(values, dtype=float)) / np.sum(w))


def _quantize_channel(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


@dataclass(eq=False)
class _Block:
    wsum: np.ndarray
    wtot: np.ndarray
    slope: np.ndarray
    vsum: np.ndarray
    vcnt: np.ndarray

    @classmethod
    def new(cls, n: int = TILE) -> "_Block":
        z = np.zeros((n, n))
        return cls(z, z.copy(), np.full((n, n), np.nan), z.copy(), z.copy())


@dataclass(eq=False)
class MapAccumulator:
    resolution: float = 0.33
    weight_cap: float = WEIGHT_CAP
    blocks: dict = field(default_factory=dict)
    n_images: int = 0

    def accumulate(self, img: BevImage, pose: Pose2D | None = None) -> "MapAccumulator":
        """Splat ``img`` into the map; ``pose`` maps image coordinates to map coordinates."""
        if abs(img.resolution - self.resolution) > 1e-9:
            raise ResolutionMismatchError(f"image resolution {img.resolution} != map {self.resolution}")
        self.n_images += 1
        if not img.mask.any():
            return self
        res = self.resolution
        h, w = img.shape
        pose = Pose2D() if pose is None else pose
        rows, cols = np.nonzero(img.mask)
        if pose == Pose2D() and np.allclose(np.asarray(img.origin) / res, np.round(np.asarray(img.origin) / res),
                                            atol=1e-6):
            off = np.round(np.asarray(img.origin) / res).astype(np.int64)
            g_row, g_col = rows + off[1], cols + off[0]
            src_r, src_c = rows, cols
        else:
            # inverse nearest-neighbour mapping over the footprint's bounding box
            corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], float) * res + np.asarray(img.origin)
            wc = se2_apply(pose, corners)
            c0, r0 = np.floor(wc.min(axis=0) / res).astype(np.int64)
            c1, r1 = np.ceil(wc.max(axis=0) / res).astype(np.int64)
            gr, gc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
            centres = np.column_stack([(gc.ravel() + 0.5) * res, (gr.ravel() + 0.5) * res])
            local = se2_apply(pose.inverse(), centres)
            uv = np.floor((local - np.asarray(img.origin)) / res).astype(np.int64)
            inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
            src_c, src_r = uv[inside, 0], uv[inside, 1]
            keep = img.mask[src_r, src_c]
            src_r, src_c = src_r[keep], src_c[keep]
            g_row, g_col = gr.ravel()[inside][keep], gc.ravel()[inside][keep]

        inten = img.intensity[src_r, src_c]
        slope = img.slope[src_r, src_c]
        var = img.variance[src_r, src_c]
        raw = img.raw_variance[src_r, src_c] if img.raw_variance is not None else var
        cnt = img.count[src_r, src_c] if img.count is not None else np.ones(len(src_r))
        wgt = inverse_variance_weight(raw, self.weight_cap)

        b_row, b_col = np.floor_divide(g_row, TILE), np.floor_divide(g_col, TILE)
        l_row, l_col = g_row - b_row * TILE, g_col - b_col * TILE
        keys = b_row * (1 << 32) + b_col
        order = np.argsort(keys, kind="stable")
        ukeys, starts = np.unique(keys[order], return_index=True)
        bounds = list(starts) + [len(order)]
        for k, key in enumerate(ukeys):
            sel = order[bounds[k]:bounds[k + 1]]
            bkey = (int(b_row[sel[0]]), int(b_col[sel[0]]))
            blk = self.blocks.get(bkey)
            if blk is None:
                blk = self.blocks[bkey] = _Block.new()
            r, c = l_row[sel], l_col[sel]
            # inverse mapping hits each map pixel at most once, so plain fancy assignment is safe
            blk.wsum[r, c] += wgt[sel] * inten[sel]
            blk.wtot[r, c] += wgt[sel]
            s = slope[sel]
            nz = s > 0
            blk.slope[r[nz], c[nz]] = np.fmin(blk.slope[r[nz], c[nz]], s[nz])
            blk.vsum[r, c] += cnt[sel] * var[sel]
            blk.vcnt[r, c] += cnt[sel]
        return self

    def finalize(self) -> "PriorMap":
        if self.n_images == 0:
            raise EmptyMapError("no images accumulated")
        tiles = {}
        for key, blk in self.blocks.items():
            valid = blk.wtot > 0
            if not valid.any():
                continue
            inten = np.where(valid, blk.wsum / np.where(valid, blk.wtot, 1.0), 0.0)
            slope = np.nan_to_num(blk.slope)
            var = np.where(blk.vcnt > 0, blk.vsum / np.where(blk.vcnt > 0, blk.vcnt, 1.0), 0.0)
            q = np.stack([_quantize_channel(inten), _quantize_channel(slope), _quantize_channel(var)], axis=-1)
            q[~valid] = 0
            blank = valid & ~q.any(axis=-1)
            q[blank, 0] = 1
            tiles[key] = q
        if not tiles:
            raise EmptyMapError("accumulated images hold no valid pixels")
        return PriorMap.from_blocks(tiles, self.resolution)


class PriorMap:
    """Georeferenced 3-band 8-bit raster made of 256 x 256 tiles.

    ``origin`` is the world position of the lower-left corner; ``height`` and
    ``width`` are in pixels.  Tiles are fetched lazily when backed by a file.
    """

    def __init__(self, width: int, height: int, origin, resolution: float, tile_size: int = TILE,
                 tiles: dict | None = None, reader: GeoTiffReader | None = None):
        self.width = int(width)
        self.height = int(height)
        self.origin = (float(origin[0]), float(origin[1]))
        self.resolution = float(resolution)
        self.tile_size = int(tile_size)
        self._tiles = tiles  # file-orientation tiles keyed (tile_row, tile_col)
        self._reader = reader

    # -- construction ---------------------------------------------------------------

    @classmethod
    def from_blocks(cls, blocks: dict, resolution: float) -> "PriorMap":
        """Blocks keyed by world block index (row along +y, col along +x), BEV orientation."""
        rows = [k[0] for k in blocks]
        cols = [k[1] for k in blocks]
        r0, r1, c0, c1 = min(rows), max(rows), min(cols), max(cols)
        n_down = r1 - r0 + 1
        tiles = {(r1 - br, bc - c0): np.ascontiguousarray(t[::-1]) for (br, bc), t in blocks.items()}
        origin = (c0 * TILE * resolution, r0 * TILE * resolution)
        return cls((c1 - c0 + 1) * TILE, n_down * TILE, origin, resolution, TILE, tiles=tiles)

    @classmethod
    def from_raster(cls, raster: np.ndarray, origin, resolution: float, tile_size: int = TILE) -> "PriorMap":
        """From a BEV-oriented (H, W, 3) uint8 raster (row 0 at the southern edge)."""
        raster = np.asarray(raster, dtype=np.uint8)
        h, w, _ = raster.shape
        north_up = raster[::-1]
        tiles = {}
        for tr in range(-(-h // tile_size)):
            for tc in range(-(-w // tile_size)):
                t = np.zeros((tile_size, tile_size, 3), np.uint8)
                part = north_up[tr * tile_size:(tr + 1) * tile_size, tc * tile_size:(tc + 1) * tile_size]
                t[:part.shape[0], :part.shape[1]] = part
                if t.any():
                    tiles[(tr, tc)] = t
        return cls(w, h, origin, resolution, tile_size, tiles=tiles)

    @classmethod
    def read(cls, path, cache_tiles: int = 64) -> "PriorMap":
        r = GeoTiffReader(path, cache_tiles)
        if r.tile_width != r.tile_length:
            raise ValueError(f"{path}: non-square tiles")
        g = r.geo
        origin = (g.x_min, g.y_max - r.height * g.resolution)
        return cls(r.width, r.height, origin, g.resolution, r.tile_width, reader=r)

    def write(self, path, compression: int | None = None, predictor: bool = True) -> None:
        geo = GeoReference(self.origin[0], self.origin[1] + self.height * self.resolution, self.resolution)
        write_geotiff(path, self._file_window(0, 0, self.height, self.width), geo, compression,
                      predictor, self.tile_size)

    # -- pixel access ---------------------------------------------------------------

    @property
    def geo(self) -> GeoReference:
        return GeoReference(self.origin[0], self.origin[1] + self.height * self.resolution, self.resolution)

    def tile_keys(self) -> list:
        if self._tiles is not None:
            return sorted(self._tiles)
        r = self._reader
        return [(tr, tc) for tr in range(r.tiles_down) for tc in range(r.tiles_across) if r.tile_present(tr, tc)]

    def _tile(self, tr: int, tc: int):
        if self._tiles is not None:
            return self._tiles.get((tr, tc))
        if not self._reader.tile_present(tr, tc):
            return None
        return self._reader.read_tile(tr, tc)

    def _file_window(self, fr0: int, fc0: int, h: int, w: int) -> np.ndarray:
        out = np.zeros((h, w, 3), np.uint8)
        ts = self.tile_size
        r_lo, r_hi = max(fr0, 0), min(fr0 + h, self.height)
        c_lo, c_hi = max(fc0, 0), min(fc0 + w, self.width)
        if r_lo >= r_hi or c_lo >= c_hi:
            return out
        for tr in range(r_lo // ts, (r_hi - 1) // ts + 1):
            for tc in range(c_lo // ts, (c_hi - 1) // ts + 1):
                tile = self._tile(tr, tc)
                if tile is None:
                    continue
                a0, a1 = max(r_lo, tr * ts), min(r_hi, (tr + 1) * ts)
                b0, b1 = max(c_lo, tc * ts), min(c_hi, (tc + 1) * ts)
                out[a0 - fr0:a1 - fr0, b0 - fc0:b1 - fc0] = tile[a0 - tr * ts:a1 - tr * ts, b0 - tc * ts:b1 - tc * ts]
        return out

    def window(self, r0: int, c0: int, h: int, w: int) -> np.ndarray:
        """BEV-oriented (h, w, 3) pixels starting at map row ``r0`` (south) and column ``c0``."""
        return self._file_window(self.height - r0 - h, c0, h, w)[::-1]

    def to_raster(self) -> np.ndarray:
        return self.window(0, 0, self.height, self.width)

    def world_to_index(self, xy) -> np.ndarray:
        """(col, row) of the map pixel containing ``xy``."""
        return np.floor((np.asarray(xy, dtype=float) - np.asarray(self.origin)) / self.resolution).astype(np.int64)

    def crop(self, center_xy, size_px: int) -> BevImage:
        if size_px <= 0:
            raise ValueError("size_px must be positive")
        col, row = self.world_to_index(center_xy)
        c0, r0 = int(col) - size_px // 2, int(row) - size_px // 2
        raster = self.window(r0, c0, size_px, size_px)
        origin = (self.origin[0] + c0 * self.resolution, self.origin[1] + r0 * self.resolution)
        return dequantize(raster, raster.any(axis=-1), self.resolution, origin)

    @property
    def raw_bytes(self) -> int:
        return self.width * self.height * 3

    @property
    def footprint_km2(self) -> float:
        valid = 0
        for key in self.tile_keys():
            valid += int(self._tile(*key).any(axis=-1).sum())
        return valid * self.resolution ** 2 / 1e6


def accumulate(acc: MapAccumulator, img: BevImage, pose: Pose2D | None = None) -> MapAccumulator:
    return acc.accumulate(img, pose)


def finalize(acc: MapAccumulator) -> PriorMap:
    return acc.finalize()


def write_map(prior: PriorMap, path, **kw) -> None:
    prior.write(path, **kw)


def read_map(path) -> PriorMap:
    return PriorMap.read(path)


def crop_local(prior: PriorMap, center, size_px: int) -> BevImage:
    """Axis-aligned crop centred on the map pixel containing ``center`` (Pose2D or xy)."""
    xy = center.t if isinstance(center, Pose2D) else np.asarray(center, dtype=float)
    return prior.crop(xy, size_px)


class PriorMapBuilder(BaseEstimator):
    """``fit(images, poses)`` / ``partial_fit(image, pose)`` then ``finalize()``."""

    def __init__(self, resolution=0.33, weight_cap=WEIGHT_CAP):
        self.resolution = resolution
        self.weight_cap = weight_cap

    def _reset(self):
        self.accumulator_ = MapAccumulator(self.resolution, self.weight_cap)

    def fit(self, images, poses=None):
        self._reset()
        poses = [None] * len(images) if poses is None else poses
        for img, pose in zip(images, poses):
            self.accumulator_.accumulate(img, pose)
        return self

    def partial_fit(self, image: BevImage, pose: Pose2D | None = None):
        if not hasattr(self, "accumulator_"):
            self._reset()
        self.accumulator_.accumulate(image, pose)
        return self

    def finalize(self) -> PriorMap:
        return self.accumulator_.finalize()


def storage_ratio(path, prior: PriorMap) -> float:
    from pathlib import Path

    return Path(path).stat().st_size / prior.raw_bytes


def mb_per_km2(path, prior: PriorMap) -> float:
    from pathlib import Path

    area = prior.footprint_km2
    return (Path(path).stat().st_size / 1e6) / area if area > 0 else math.nan
