"""Deterministic synthetic scenes, LiDAR scan simulation and drifting odometry.

A scene is a ground surface (the plane z = 0 plus planar rectangular patches)
carrying an intensity texture, with static boxes and moving boxes on top.  The
texture is rasterized lazily in 25.6 m tiles at ``texture_resolution`` from the
explicit markings plus procedurally scattered "clutter" elements whose layout
depends only on the seed and the tile index.
"""
from __future__ import annotations

import hashlib
import math
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .geometry import PointCloud, Pose3D, Trajectory, wrap_angle, yaw_to_quat

TILE_PX = 256


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GroundPatch:
    """Axis-aligned rectangle with surface z = z0 + gx (x - x0) + gy (y - y0)."""

    x0: float
    y0: float
    x1: float
    y1: float
    z0: float = 0.0
    gx: float = 0.0
    gy: float = 0.0

    def height(self, x, y):
        return self.z0 + self.gx * (x - self.x0) + self.gy * (y - self.y0)

    def contains(self, x, y):
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)


@dataclass(frozen=True)
class LineMarking:
    """Painted segment; ``dash > 0`` makes it dashed with period ``dash + gap``."""

    x0: float
    y0: float
    x1: float
    y1: float
    width: float = 0.15
    intensity: float = 0.9
    dash: float = 0.0
    gap: float = 0.0
    phase: float = 0.0


@dataclass(frozen=True)
class Blob:
    """Filled disc, square (rotated by ``angle``) or ellipse (axes radius, radius * aspect)."""

    x: float
    y: float
    radius: float
    intensity: float
    shape: str = "disc"
    angle: float = 0.0
    aspect: float = 1.0


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float
    clearance: float = 0.0
    intensity: float = 0.5


@dataclass(frozen=True)
class MovingBox:
    """Box of ``size`` (sx, sy, h) centred at ``start + velocity * (t - t0)`` for t in [t0, t1]."""

    sx: float
    sy: float
    height: float
    start_x: float
    start_y: float
    vx: float
    vy: float
    t0: float = -math.inf
    t1: float = math.inf
    clearance: float = 0.3
    intensity: float = 0.5

    def box_at(self, t: float) -> Box | None:
        if not self.t0 <= t <= self.t1:
            return None
        dt = t - (self.t0 if math.isfinite(self.t0) else 0.0)
        cx, cy = self.start_x + self.vx * dt, self.start_y + self.vy * dt
        return Box(cx - self.sx / 2, cy - self.sy / 2, cx + self.sx / 2, cy + self.sy / 2,
                   self.height, self.clearance, self.intensity)


@dataclass
class SceneSpec:
    extent: tuple = (0.0, 0.0, 200.0, 200.0)  # x_min, y_min, x_max, y_max
    base_intensity: float = 0.25
    patches: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    blobs: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    movers: list = field(default_factory=list)
    clutter_density: float = 0.0  # elements per m^2
    clutter_radius: tuple = (0.4, 1.4)
    clutter_contrast: tuple = (0.15, 0.6)
    texture_resolution: float = 0.1
    seed: int = 0

    _KINDS = {"patches": GroundPatch, "lines": LineMarking, "blobs": Blob, "boxes": Box, "movers": MovingBox}

    def to_mapping(self) -> dict:
        """Plain Python values (YAML-safe); numbers become float except the seed."""
        d = {k: float(getattr(self, k)) for k in ("base_intensity", "clutter_density", "texture_resolution")}
        d["seed"] = int(self.seed)
        for k in ("extent", "clutter_radius", "clutter_contrast"):
            d[k] = [float(v) for v in getattr(self, k)]
        for k in self._KINDS:
            d[k] = [{f: (v if isinstance(v, str) else float(v)) for f, v in asdict(e).items()}
                    for e in getattr(self, k)]
        return d

    @classmethod
    def from_mapping(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k, typ in cls._KINDS.items():
            d[k] = [e if isinstance(e, typ) else typ(**e) for e in d.get(k, [])]
        for k in ("extent", "clutter_radius", "clutter_contrast"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


def _validate(spec: SceneSpec) -> None:
    x0, y0, x1, y1 = spec.extent
    if not (x1 > x0 and y1 > y0):
        raise SceneSpecError(f"empty extent {spec.extent}")
    if spec.texture_resolution <= 0 or spec.clutter_density < 0:
        raise SceneSpecError("texture_resolution must be positive and clutter_density non-negative")

    def inside(px0, py0, px1, py1):
        return px0 >= x0 and py0 >= y0 and px1 <= x1 and py1 <= y1

    for p in spec.patches:
        if not (p.x1 > p.x0 and p.y1 > p.y0) or not inside(p.x0, p.y0, p.x1, p.y1):
            raise SceneSpecError(f"patch {p} is degenerate or outside the extent")
    for b in spec.boxes:
        if not inside(b.x0, b.y0, b.x1, b.y1) or b.height <= 0:
            raise SceneSpecError(f"box {b} is degenerate or outside the extent")
    for ln in spec.lines:
        if not inside(min(ln.x0, ln.x1), min(ln.y0, ln.y1), max(ln.x0, ln.x1), max(ln.y0, ln.y1)):
            raise SceneSpecError(f"line {ln} outside the extent")
    for bl in spec.blobs:
        if not inside(bl.x, bl.y, bl.x, bl.y):
            raise SceneSpecError(f"blob {bl} outside the extent")
    # overlapping patches must agree on the surface where they overlap
    for i, a in enumerate(spec.patches):
        for b in spec.patches[i + 1:]:
            ox0, oy0, ox1, oy1 = max(a.x0, b.x0), max(a.y0, b.y0), min(a.x1, b.x1), min(a.y1, b.y1)
            if ox0 >= ox1 or oy0 >= oy1:
                continue
            cx = np.array([ox0, ox1, ox0, ox1])
            cy = np.array([oy0, oy0, oy1, oy1])
            if np.max(np.abs(a.height(cx, cy) - b.height(cx, cy))) > 1e-9:
                raise SceneSpecError(f"patches {a} and {b} overlap with different surfaces")


def _paint_blob(tile: np.ndarray, ox: float, oy: float, res: float, b: Blob) -> None:
    r = b.radius * max(1.0, b.aspect) * (math.sqrt(2) if b.shape == "square" else 1.0)
    c0, c1 = int((b.x - r - ox) / res), int(math.ceil((b.x + r - ox) / res))
    r0, r1 = int((b.y - r - oy) / res), int(math.ceil((b.y + r - oy) / res))
    n = tile.shape[0]
    c0, r0, c1, r1 = max(c0, 0), max(r0, 0), min(c1, n), min(r1, n)
    if c0 >= c1 or r0 >= r1:
        return
    xs = ox + (np.arange(c0, c1) + 0.5) * res - b.x
    ys = oy + (np.arange(r0, r1) + 0.5) * res - b.y
    X, Y = np.meshgrid(xs, ys)
    ca, sa = math.cos(b.angle), math.sin(b.angle)
    u, v = ca * X + sa * Y, -sa * X + ca * Y
    if b.shape == "square":
        m = (np.abs(u) <= b.radius) & (np.abs(v) <= b.radius * b.aspect)
    elif b.shape == "ellipse":
        m = (u / b.radius) ** 2 + (v / (b.radius * b.aspect)) ** 2 <= 1.0
    else:
        m = X ** 2 + Y ** 2 <= b.radius ** 2
    tile[r0:r1, c0:c1][m] = b.intensity


def _paint_line(tile: np.ndarray, ox: float, oy: float, res: float, ln: LineMarking) -> None:
    hw = ln.width / 2
    n = tile.shape[0]
    c0 = max(int((min(ln.x0, ln.x1) - hw - ox) / res), 0)
    c1 = min(int(math.ceil((max(ln.x0, ln.x1) + hw - ox) / res)), n)
    r0 = max(int((min(ln.y0, ln.y1) - hw - oy) / res), 0)
    r1 = min(int(math.ceil((max(ln.y0, ln.y1) + hw - oy) / res)), n)
    if c0 >= c1 or r0 >= r1:
        return
    X, Y = np.meshgrid(ox + (np.arange(c0, c1) + 0.5) * res, oy + (np.arange(r0, r1) + 0.5) * res)
    d = np.array([ln.x1 - ln.x0, ln.y1 - ln.y0], dtype=float)
    L = float(np.hypot(*d))
    if L == 0:
        return
    d /= L
    s = (X - ln.x0) * d[0] + (Y - ln.y0) * d[1]
    lat = -(X - ln.x0) * d[1] + (Y - ln.y0) * d[0]
    m = (np.abs(lat) <= hw) & (s >= 0) & (s <= L)
    if ln.dash > 0:
        m &= np.mod(s + ln.phase, ln.dash + ln.gap) < ln.dash
    tile[r0:r1, c0:c1][m] = ln.intensity


class Scene:
    """Queryable surface: ``height(x, y)``, ``intensity(x, y)``, ``occupancy(x, y, t)``."""

    tile_cache = 1024

    def __init__(self, spec: SceneSpec):
        _validate(spec)
        self.spec = spec
        self.tile_m = TILE_PX * spec.texture_resolution
        self._tiles: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    # -- surface --------------------------------------------------------------------

    def height(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        z = np.zeros(x.shape)
        for p in self.spec.patches:
            m = p.contains(x, y)
            z[m] = p.height(x[m], y[m])
        return z

    def boxes_at(self, t: float) -> list:
        out = list(self.spec.boxes)
        for mv in self.spec.movers:
            b = mv.box_at(t)
            if b is not None:
                out.append(b)
        return out

    def occupancy(self, x, y, t: float = 0.0) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        occ = np.zeros(x.shape, bool)
        for b in self.boxes_at(t):
            occ |= (x >= b.x0) & (x <= b.x1) & (y >= b.y0) & (y <= b.y1)
        return occ

    # -- texture --------------------------------------------------------------------

    def _clutter(self, tx: int, ty: int) -> list:
        s = self.spec
        if s.clutter_density <= 0:
            return []
        rng = np.random.default_rng([s.seed & 0xFFFFFFFF, tx + (1 << 30), ty + (1 << 30)])
        n = rng.poisson(s.clutter_density * self.tile_m ** 2)
        xs = (tx + rng.random(n)) * self.tile_m
        ys = (ty + rng.random(n)) * self.tile_m
        radius = rng.uniform(*s.clutter_radius, n)
        contrast = rng.uniform(*s.clutter_contrast, n) * np.where(rng.random(n) < 0.7, 1.0, -1.0)
        shapes = rng.choice(np.array(["disc", "square", "ellipse"]), n)
        angle = rng.uniform(0, np.pi, n)
        aspect = rng.uniform(0.4, 1.0, n)
        inten = np.clip(s.base_intensity + contrast, 0.02, 1.0)
        return [Blob(float(xs[i]), float(ys[i]), float(radius[i]), float(inten[i]), str(shapes[i]),
                     float(angle[i]), float(aspect[i])) for i in range(n)]

    def _build_tile(self, tx: int, ty: int) -> np.ndarray:
        s = self.spec
        res = s.texture_resolution
        ox, oy = tx * self.tile_m, ty * self.tile_m
        tile = np.full((TILE_PX, TILE_PX), s.base_intensity, dtype=np.float32)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                for b in self._clutter(tx + dx, ty + dy):
                    _paint_blob(tile, ox, oy, res, b)
        for b in s.blobs:
            _paint_blob(tile, ox, oy, res, b)
        for ln in s.lines:
            _paint_line(tile, ox, oy, res, ln)
        # the scene ends at its extent
        x0, y0, x1, y1 = s.extent
        xs = ox + (np.arange(TILE_PX) + 0.5) * res
        ys = oy + (np.arange(TILE_PX) + 0.5) * res
        outside = ((ys < y0) | (ys >= y1))[:, None] | ((xs < x0) | (xs >= x1))[None, :]
        tile[outside] = s.base_intensity
        return np.round(tile * 255.0).astype(np.uint8)

    def _tile(self, tx: int, ty: int) -> np.ndarray:
        key = (tx, ty)
        with self._lock:
            t = self._tiles.get(key)
            if t is not None:
                self._tiles.move_to_end(key)
                return t
        t = self._build_tile(tx, ty)
        with self._lock:
            self._tiles[key] = t
            while len(self._tiles) > self.tile_cache:
                self._tiles.popitem(last=False)
        return t

    def intensity(self, x, y) -> np.ndarray:
        """Nearest-texel reflectance in [0, 1]."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        shape = x.shape
        x, y = x.ravel(), y.ravel()
        res = self.spec.texture_resolution
        gx = np.floor(x / res).astype(np.int64)
        gy = np.floor(y / res).astype(np.int64)
        tx, ty = np.floor_divide(gx, TILE_PX), np.floor_divide(gy, TILE_PX)
        lx, ly = gx - tx * TILE_PX, gy - ty * TILE_PX
        out = np.empty(len(x), dtype=np.float64)
        key = tx * (1 << 32) + ty
        order = np.argsort(key, kind="stable")
        ukeys, starts = np.unique(key[order], return_index=True)
        bounds = list(starts) + [len(order)]
        for k in range(len(ukeys)):
            sel = order[bounds[k]:bounds[k + 1]]
            tile = self._tile(int(tx[sel[0]]), int(ty[sel[0]]))
            out[sel] = tile[ly[sel], lx[sel]] / 255.0
        return out.reshape(shape)

    def digest(self) -> str:
        """Hash of the spec plus a fixed probe of the surface; equal for equal scenes."""
        h = hashlib.sha256(repr(self.spec.to_mapping()).encode())
        x0, y0, x1, y1 = self.spec.extent
        g = np.linspace(0.0, 1.0, 33)
        X, Y = np.meshgrid(x0 + g * (x1 - x0 - 1e-6), y0 + g * (y1 - y0 - 1e-6))
        h.update(self.height(X, Y).tobytes())
        h.update(self.intensity(X, Y).tobytes())
        return h.hexdigest()


def generate_scene(spec: SceneSpec | None = None) -> Scene:
    return Scene(spec if spec is not None else SceneSpec())


# -- sensor ---------------------------------------------------------------------------

PATTERNS = ("rings_360", "wedge_fov", "raster_lissajous")


@dataclass(frozen=True)
class SensorModel:
    pattern: str = "rings_360"
    channels: int = 128
    n_points: int = 65536
    max_range: float = 60.0
    min_range: float = 1.0
    elevation: tuple = (-22.5, 2.0)  # degrees
    fov: float = 70.0  # azimuth wedge or circular field of view, degrees
    gain: float = 1.0
    sigma_range: float = 0.02
    sigma_intensity: float = 0.02

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown scan pattern {self.pattern!r}; expected one of {PATTERNS}")
        if min(self.channels, self.n_points, self.max_range, self.fov, self.gain) <= 0:
            raise ValueError("sensor channels, points, range, fov and gain must be positive")
        if self.sigma_range < 0 or self.sigma_intensity < 0 or not 0 <= self.min_range < self.max_range:
            raise ValueError("sensor noise must be non-negative and min_range < max_range")

    def directions(self, time: float = 0.0) -> np.ndarray:
        """Unit ray directions in the sensor frame, (N, 3)."""
        el0, el1 = np.deg2rad(self.elevation)
        if self.pattern in ("rings_360", "wedge_fov"):
            n_az = max(1, self.n_points // self.channels)
            el = np.linspace(el0, el1, self.channels)
            if self.pattern == "rings_360":
                az = np.arange(n_az) * (2 * np.pi / n_az)
            else:
                half = np.deg2rad(self.fov) / 2
                az = np.linspace(-half, half, n_az)
            A, E = np.meshgrid(az, el)
            A, E = A.ravel(), E.ravel()
        else:
            # rosette-like non-repetitive pattern inside a circular field of view
            k = np.arange(self.n_points, dtype=float)
            phase = time * 7.31
            r = np.deg2rad(self.fov) / 2 * np.abs(np.sin(0.5 * 0.0617 * k + phase))
            th = 0.01137 * k + 1.7 * phase
            A, E = r * np.cos(th), r * np.sin(th) + (el0 + el1) / 2
        ce = np.cos(E)
        return np.column_stack([ce * np.cos(A), ce * np.sin(A), np.sin(E)])


def _slab(o, d, lo, hi):
    """Entry/exit ray parameters of an axis-aligned box (broadcast over rays)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # rays parallel to a slab and outside it never enter
    par = d == 0
    outside = par & ((o < lo) | (o > hi))
    tmin = np.where(par, -np.inf, tmin)
    tmax = np.where(par, np.inf, tmax)
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    leave = np.where(outside.any(axis=1), -np.inf, leave)
    return enter, leave


def raycast(scene: Scene, origin, dirs: np.ndarray, time: float = 0.0, max_range: float = np.inf):
    """First hit per ray against ground, patches and boxes.

    Returns ``(t, kind)`` with ``kind`` 0 = no hit, 1 = ground, 2 = box.
    """
    o = np.asarray(origin, dtype=float)
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    kind = np.zeros(n, np.int8)
    dz = dirs[:, 2]
    reach = max_range if np.isfinite(max_range) else 1e6

    # base plane z = 0, valid where no patch covers the hit
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = np.where(dz < 0, -o[2] / dz, np.inf)
        hx, hy = o[0] + tb * dirs[:, 0], o[1] + tb * dirs[:, 1]
    valid = np.isfinite(tb) & (tb > 0)
    near = [p for p in scene.spec.patches
            if p.x1 >= o[0] - reach and p.x0 <= o[0] + reach and p.y1 >= o[1] - reach and p.y0 <= o[1] + reach]
    for p in near:
        valid &= ~p.contains(hx, hy)
    t_hit = np.where(valid, tb, t_hit)
    kind[valid] = 1

    for p in near:
        lo = np.array([p.x0, p.y0])
        hi = np.array([p.x1, p.y1])
        ta, tb2 = _slab(o[:2], dirs[:, :2], lo, hi)
        ta = np.maximum(ta, 0.0)
        hit_any = ta < tb2
        if not hit_any.any():
            continue
        # f(t) = ray z - surface z, linear in t
        A = o[2] - p.height(o[0], o[1])
        B = dz - (p.gx * dirs[:, 0] + p.gy * dirs[:, 1])
        f_a = A + B * ta
        wall = hit_any & (f_a <= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.where(B < 0, -A / B, np.inf)
        top = hit_any & ~wall & (root >= ta) & (root <= tb2)
        cand = np.where(wall, ta, np.where(top, root, np.inf))
        better = cand < t_hit
        t_hit = np.where(better, cand, t_hit)
        kind[better] = 1

    for b in scene.boxes_at(time):
        if b.x1 < o[0] - reach or b.x0 > o[0] + reach or b.y1 < o[1] - reach or b.y0 > o[1] + reach:
            continue
        zb = float(scene.height((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2)) + b.clearance
        enter, leave = _slab(o[None, :], dirs, np.array([b.x0, b.y0, zb]), np.array([b.x1, b.y1, zb + b.height]))
        ok = (enter < leave) & (enter > 0)
        better = ok & (enter < t_hit)
        t_hit = np.where(better, enter, t_hit)
        kind[better] = 2
    kind[~np.isfinite(t_hit)] = 0
    return t_hit, kind


def simulate_scan(scene: Scene, sensor_pose: Pose3D, model: SensorModel, time: float = 0.0,
                  rng: np.random.Generator | int | None = None) -> PointCloud:
    """Simulated scan in the sensor frame (x forward, z up)."""
    rng = np.random.default_rng(rng)
    dirs_s = model.directions(time)
    R = sensor_pose.rotation_matrix()
    dirs_w = dirs_s @ R.T
    t, kind = raycast(scene, sensor_pose.position, dirs_w, time, model.max_range)
    keep = (kind > 0) & (t >= model.min_range) & (t <= model.max_range)
    # draw noise for every ray so the stream does not depend on which rays hit
    n_range = rng.normal(0.0, 1.0, len(t))
    n_int = rng.normal(0.0, 1.0, len(t))
    t, kind, dirs_s, dirs_w = t[keep], kind[keep], dirs_s[keep], dirs_w[keep]
    hit = sensor_pose.position + t[:, None] * dirs_w
    refl = np.where(kind == 1, scene.intensity(hit[:, 0], hit[:, 1]), 0.0)
    if scene.spec.boxes or scene.spec.movers:
        box_i = _box_intensity(scene, hit, time)
        refl = np.where(kind == 2, box_i, refl)
    inten = np.clip(refl * model.gain + model.sigma_intensity * n_int[keep], 0.0, None)
    pts = dirs_s * (t + model.sigma_range * n_range[keep])[:, None]
    return PointCloud(np.column_stack([pts, inten]).astype(np.float32), stamp=time)


def _box_intensity(scene: Scene, hit: np.ndarray, time: float) -> np.ndarray:
    out = np.zeros(len(hit))
    for b in scene.boxes_at(time):
        m = (hit[:, 0] >= b.x0 - 1e-6) & (hit[:, 0] <= b.x1 + 1e-6) & \
            (hit[:, 1] >= b.y0 - 1e-6) & (hit[:, 1] <= b.y1 + 1e-6)
        out[m] = b.intensity
    return out


# -- drives ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftModel:
    yaw_rate_bias: float = 0.0  # degrees per metre travelled
    scale_bias: float = 0.0  # percent of step length


def drift_odometry(truth: Trajectory, drift: DriftModel) -> Trajectory:
    """Integrate true body-frame steps corrupted by a per-metre yaw bias and a length scale bias.

    Each step advances along the mid-step heading, so a constant yaw bias on a
    straight path traces a circular arc through the step endpoints.
    """
    n = len(truth)
    if n == 0:
        return truth
    pos = truth.positions
    yaw = truth.yaws
    k = math.radians(drift.yaw_rate_bias)
    scale = 1.0 + drift.scale_bias / 100.0
    out_p = np.empty_like(pos)
    out_y = np.empty(n)
    out_p[0], out_y[0] = pos[0], yaw[0]
    for i in range(1, n):
        d = pos[i] - pos[i - 1]
        c, s = math.cos(yaw[i - 1]), math.sin(yaw[i - 1])
        # horizontal step in the previous body frame
        bx, by = c * d[0] + s * d[1], -s * d[0] + c * d[1]
        ds = math.hypot(bx, by)
        dyaw = wrap_angle(yaw[i] - yaw[i - 1])
        err = k * ds
        mid = out_y[i - 1] + err / 2
        oc, os_ = math.cos(mid), math.sin(mid)
        out_p[i, 0] = out_p[i - 1, 0] + scale * (oc * bx - os_ * by)
        out_p[i, 1] = out_p[i - 1, 1] + scale * (os_ * bx + oc * by)
        out_p[i, 2] = out_p[i - 1, 2] + d[2]
        out_y[i] = out_y[i - 1] + dyaw + err
    quats = np.array([yaw_to_quat(a) for a in out_y])
    return Trajectory(truth.stamps.copy(), out_p, quats)


def arc_endpoint(length: float, yaw_rate_bias: float, scale_bias: float = 0.0) -> np.ndarray:
    """Endpoint of a straight drive along +x integrated with a constant yaw bias."""
    k = math.radians(yaw_rate_bias)
    L = length * (1.0 + scale_bias / 100.0)
    if k == 0:
        return np.array([L, 0.0])
    # circular arc of curvature k; the mid-heading steps sit on it up to O((k ds)^2)
    phi = k * length
    return np.array([math.sin(phi), 1.0 - math.cos(phi)]) * (L / phi)


@dataclass
class Frame:
    index: int
    stamp: float
    cloud: PointCloud
    truth: Pose3D
    odom: Pose3D


@dataclass
class Drive:
    """Scripted drive; clouds are simulated on demand and depend only on (seed, index)."""

    scene: Scene
    truth: Trajectory
    odometry: Trajectory
    model: SensorModel
    seed: int = 0
    sensor_height: float = 1.8

    def __len__(self) -> int:
        return len(self.truth)

    def cloud(self, i: int) -> PointCloud:
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, i])
        return simulate_scan(self.scene, self.truth[i], self.model, float(self.truth.stamps[i]), rng)

    def frame(self, i: int) -> Frame:
        return Frame(i, float(self.truth.stamps[i]), self.cloud(i), self.truth[i], self.odometry[i])

    def frames(self, indices=None) -> Iterator[Frame]:
        for i in (range(len(self)) if indices is None else indices):
            yield self.frame(i)


def simulate_drive(scene: Scene, path: Trajectory, model: SensorModel | None = None,
                   drift: DriftModel | None = None, seed: int = 0, sensor_height: float = 1.8) -> Drive:
    """Sensor poses follow ``path`` (x, y, yaw) at ``sensor_height`` above the ground."""
    model = model or SensorModel()
    drift = drift or DriftModel()
    xy = path.positions[:, :2]
    z = scene.height(xy[:, 0], xy[:, 1]) + sensor_height
    yaw = path.yaws
    truth = Trajectory(path.stamps.copy(), np.column_stack([xy, z]),
                       np.array([yaw_to_quat(a) for a in yaw]))
    x0, y0, x1, y1 = scene.spec.extent
    if (xy[:, 0] < x0).any() or (xy[:, 0] > x1).any() or (xy[:, 1] < y0).any() or (xy[:, 1] > y1).any():
        raise SceneSpecError("path leaves the scene extent")
    return Drive(scene, truth, drift_odometry(truth, drift), model, seed, sensor_height)


# -- paths and worlds -----------------------------------------------------------------

def _path_from_xy(xy: np.ndarray, speed: float, t0: float = 0.0) -> Trajectory:
    d = np.diff(xy, axis=0)
    yaw = np.arctan2(d[:, 1], d[:, 0])
    yaw = np.append(yaw, yaw[-1]) if len(yaw) else np.zeros(1)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(d[:, 0], d[:, 1]))])
    return Trajectory.from_xyyaw(t0 + s / speed, np.column_stack([xy, yaw]))


def straight_path(length: float, spacing: float = 1.0, speed: float = 10.0, start=(0.0, 0.0),
                  heading: float = 0.0) -> Trajectory:
    s = np.arange(0.0, length + 1e-9, spacing)
    xy = np.asarray(start, dtype=float) + s[:, None] * np.array([math.cos(heading), math.sin(heading)])
    return _path_from_xy(xy, speed)


def rounded_rect_path(width: float, height: float, radius: float, spacing: float = 1.0,
                      speed: float = 10.0, center=(0.0, 0.0), length: float | None = None) -> Trajectory:
    """Counter-clockwise rounded rectangle starting mid-way along the bottom side."""
    w, h, r = width / 2 - radius, height / 2 - radius, radius
    if w < 0 or h < 0:
        raise ValueError("radius exceeds half the rectangle size")
    segs = [("line", (0, -h - r), (w, -h - r)), ("arc", (w, -h), -np.pi / 2),
            ("line", (w + r, -h), (w + r, h)), ("arc", (w, h), 0.0),
            ("line", (w, h + r), (-w, h + r)), ("arc", (-w, h), np.pi / 2),
            ("line", (-w - r, h), (-w - r, -h)), ("arc", (-w, -h), np.pi),
            ("line", (-w, -h - r), (0, -h - r))]
    lens = [math.dist(a, b) if k == "line" else r * np.pi / 2 for k, a, b in segs]
    total = sum(lens) if length is None else length
    s_all = np.arange(0.0, total + 1e-9, spacing)
    pts = []
    perim = sum(lens)
    for s in s_all:
        s = s % perim
        for (kind, a, b), L in zip(segs, lens):
            if s <= L:
                if kind == "line":
                    f = s / L if L > 0 else 0.0
                    pts.append((a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])))
                else:
                    ang = b + s / r
                    pts.append((a[0] + r * math.cos(ang), a[1] + r * math.sin(ang)))
                break
            s -= L
    xy = np.asarray(pts) + np.asarray(center, dtype=float)
    return _path_from_xy(xy, speed)


def _offset_polyline(xy: np.ndarray, offset: float) -> np.ndarray:
    d = np.gradient(xy, axis=0)
    n = np.column_stack([-d[:, 1], d[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return xy + offset * n


def lane_markings(path: Trajectory, half_width: float = 3.5, step: float = 4.0) -> list:
    """Solid edge lines and a dashed centre line following ``path``."""
    xy = path.positions[:, :2]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    keep = np.unique(np.searchsorted(s, np.arange(0.0, s[-1] + 1e-9, step)).clip(0, len(xy) - 1))
    pts = xy[keep]
    lines = []
    for off in (-half_width, half_width):
        e = _offset_polyline(pts, off)
        lines += [LineMarking(*e[i], *e[i + 1], width=0.2, intensity=0.9) for i in range(len(e) - 1)]
    acc = 0.0
    for i in range(len(pts) - 1):
        lines.append(LineMarking(*pts[i], *pts[i + 1], width=0.2, intensity=0.85, dash=3.0, gap=6.0,
                                 phase=acc))
        acc += float(np.linalg.norm(pts[i + 1] - pts[i]))
    return lines


def road_world(seed: int = 0, extent: float = 1000.0, path_length: float = 1000.0,
               spacing: float = 1.0, speed: float = 10.0, clutter_density: float = 0.04,
               n_boxes: int = 60, n_patches: int = 12) -> tuple[SceneSpec, Trajectory]:
    """Square world of side ``extent`` with a closed road loop of ``path_length`` metres.

    The loop is a rounded rectangle with aspect 3:2 centred in the world; boxes
    and raised or sloped patches are scattered at least 8 m from the road.
    """
    rng = np.random.default_rng(seed)
    # short loops get tighter corners so that the straights stay non-negative
    r = min(30.0, 0.9 * path_length / (2 * np.pi + 2))
    # perimeter = 2 (a + b) - 8 r + 2 pi r with a = 1.5 b
    b = (path_length - 2 * np.pi * r + 8 * r) / 5.0
    a = 1.5 * b
    c = extent / 2
    path = rounded_rect_path(a, b, r, spacing, speed, center=(c, c), length=path_length - 1e-6)
    xy = path.positions[:, :2]

    def clear(x0, y0, x1, y1, margin=8.0):
        cx = np.clip(xy[:, 0], x0, x1)
        cy = np.clip(xy[:, 1], y0, y1)
        return np.min(np.hypot(xy[:, 0] - cx, xy[:, 1] - cy)) > margin

    def scatter(n, size_lo, size_hi, near=45.0):
        out = []
        tries = 0
        while len(out) < n and tries < 50 * n:
            tries += 1
            k = rng.integers(len(xy))
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(8.0, near)
            sx, sy = rng.uniform(size_lo, size_hi, 2)
            x0 = xy[k, 0] + dist * math.cos(ang) - sx / 2
            y0 = xy[k, 1] + dist * math.sin(ang) - sy / 2
            rect = (x0, y0, x0 + sx, y0 + sy)
            if rect[0] < 0 or rect[1] < 0 or rect[2] > extent or rect[3] > extent:
                continue
            if not clear(*rect):
                continue
            if any(not (rect[2] < o[0] or rect[0] > o[2] or rect[3] < o[1] or rect[1] > o[3]) for o in out):
                continue
            out.append(rect)
        return out

    rects = scatter(n_boxes + n_patches, 2.0, 8.0)
    boxes = [Box(*rt, height=float(rng.uniform(1.0, 6.0)), intensity=float(rng.uniform(0.2, 0.8)))
             for rt in rects[:n_boxes]]
    patches = []
    for rt in rects[n_boxes:]:
        g = rng.uniform(0.0, 0.1, 2) if rng.random() < 0.5 else (0.0, 0.0)
        patches.append(GroundPatch(*rt, z0=float(rng.uniform(0.1, 0.25)), gx=float(g[0]), gy=float(g[1])))
    spec = SceneSpec(extent=(0.0, 0.0, extent, extent), patches=patches, lines=lane_markings(path),
                     boxes=boxes, clutter_density=clutter_density, seed=seed)
    return spec, path
