"""Map building and online localization.

Localization runs three stages per frame:

A. recenter the ground grid on the odometry pose, integrate the scan, render
   the BEV image and project the odometry onto the plane;
B. extract query keypoints, gather map keypoints around the predicted pose,
   match, gate by the dynamic radius and register;
C. advance the pose filter and apply the registration.

Stage B of frame ``i`` predicts with the filter correction published by stage
C for frame ``i - lag``.  The pipelined mode runs the stages in threads joined
by bounded queues and waits on exactly that correction, so it produces the same
output as the sequential mode.
"""
from __future__ import annotations

import logging
import math
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from .bev import BevImage, SlopeState, dequantize, render_bev
from .config import NormalizationFactors, RunConfig, SegmenterConfig
from .features import FeatureSet, SiftExtractor, concat_features, extract_sift, select_top_k
from .geometry import PointCloud, Pose2D, Pose3D, Trajectory, se2_apply, se2_compose
from .ground_grid import GroundGridMap
from .kdtree import KDTree
from .map_store import MapAccumulator, PriorMap
from .matching import (MatcherState, MatchSet, dynamic_radius, filter_by_radius, match_descriptors,
                       update_hysteresis)
from .pose_filter import PoseFilter, project_to_plane
from .registration import RegistrationParams, RegistrationResult, estimate_se2

log = logging.getLogger(__name__)


@dataclass
class PipelineSettings:
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    factors: NormalizationFactors = field(default_factory=lambda: NormalizationFactors.for_sensor("synthetic"))
    sift: dict = field(default_factory=dict)
    matcher: dict = field(default_factory=dict)
    leaf_visits: int = 64
    ratio: float | None = None
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    gamma: float = 0.3
    f_i: float = 25.0
    lag: int = 1
    register: bool = True
    map_every: int = 1
    map_tile: int = 256
    map_margin: int = 64

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PipelineSettings":
        m = dict(cfg.matcher)
        leaf_visits = int(m.pop("max_leaf_visits", 64))
        ratio = m.pop("ratio", None)
        reg = dict(cfg.registrar)
        reg.setdefault("seed", cfg.seed)
        f = dict(cfg.filter)
        mp = dict(cfg.map)
        return cls(segmenter=cfg.segmenter_config(), factors=cfg.normalization(), sift=dict(cfg.features),
                   matcher=m, leaf_visits=leaf_visits, ratio=ratio, registration=RegistrationParams(**reg),
                   gamma=float(f.get("gamma", 0.3)), f_i=cfg.correction_factor(), lag=int(f.get("lag", 1)),
                   register=bool(f.get("register", True)), map_every=int(mp.get("every", 1)))

    def extractor(self) -> SiftExtractor:
        return SiftExtractor(k=None, **self.sift)

    def matcher_state(self) -> MatcherState:
        return MatcherState(**self.matcher)


# -- BEV front end --------------------------------------------------------------------

class BevFrontEnd:
    """Ground grid plus slope history; ``step(cloud, pose)`` returns the frame's BEV image."""

    def __init__(self, settings: PipelineSettings):
        self.settings = settings
        self.grid = GroundGridMap(settings.segmenter)
        self.slope_state: SlopeState | None = None

    def step(self, cloud: PointCloud, pose: Pose3D, stamp: float = 0.0) -> BevImage:
        self.grid.update(cloud, pose)
        state = self.slope_state
        if state is not None and tuple(state.origin_index) != tuple(self.grid.origin_index):
            state = state.realign(self.grid.origin_index)
        img, self.slope_state = render_bev(self.grid, self.settings.factors, state, stamp)
        return img


def build_map(frames: Iterable[tuple[float, PointCloud]], poses: Iterable[Pose3D],
              settings: PipelineSettings | None = None, on_frame: Callable | None = None) -> PriorMap:
    """Fuse the BEV image of every ``map_every``-th frame into a prior map.

    The grid is world-fixed and its cells lie on the map lattice, so images are
    accumulated without resampling.
    """
    settings = settings or PipelineSettings()
    front = BevFrontEnd(settings)
    acc = MapAccumulator(settings.segmenter.cell_size)
    n = 0
    for i, ((stamp, cloud), pose) in enumerate(zip(frames, poses)):
        img = front.step(cloud, pose, stamp)
        if i % settings.map_every == 0:
            acc.accumulate(img)
        if on_frame is not None:
            on_frame(i, img)
        n += 1
    if n == 0:
        raise ValueError("no frames to build a map from")
    # make sure the latest grid content is in the map
    if (n - 1) % settings.map_every != 0:
        acc.accumulate(img)
    return acc.finalize()


def query_images(frames: Iterable[tuple[float, PointCloud]], poses: Iterable[Pose3D], indices,
                 settings: PipelineSettings | None = None) -> list[tuple[int, BevImage]]:
    """BEV images of the frames in ``indices``, rendered along the given poses."""
    front = BevFrontEnd(settings or PipelineSettings())
    want = set(int(i) for i in indices)
    last = max(want) if want else -1
    out = []
    for i, ((stamp, cloud), pose) in enumerate(zip(frames, poses)):
        if i > last:
            break
        img = front.step(cloud, pose, stamp)
        if i in want:
            out.append((i, img))
    return out


# -- map keypoints ----------------------------------------------------------------------

class MapFeatureIndex:
    """Keypoints of a prior map, extracted per map tile with surrounding context.

    Keypoints of tile (br, bc) are detected on the tile plus ``margin`` pixels
    on every side and kept when they fall inside the tile, so tile seams do not
    produce or suppress detections.  Results are cached.
    """

    def __init__(self, prior: PriorMap, extractor: SiftExtractor | None = None, tile: int = 256,
                 margin: int = 64, cache: int = 512):
        self.prior = prior
        self.extractor = extractor or SiftExtractor(k=None)
        self.tile = tile
        self.margin = margin
        self.cache = cache
        self._tiles: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def _extract(self, br: int, bc: int) -> FeatureSet:
        p, t, mg = self.prior, self.tile, self.margin
        r0, c0 = br * t - mg, bc * t - mg
        size = t + 2 * mg
        win = p.window(r0, c0, size, size)
        origin = (p.origin[0] + c0 * p.resolution, p.origin[1] + r0 * p.resolution)
        img = dequantize(win, win.any(axis=-1), p.resolution, origin)
        fs = self.extractor.transform(img)
        core = ((fs.uv[:, 0] >= mg - 0.5) & (fs.uv[:, 0] < mg + t - 0.5) &
                (fs.uv[:, 1] >= mg - 0.5) & (fs.uv[:, 1] < mg + t - 0.5))
        return fs.subset(np.flatnonzero(core))

    def tile_features(self, br: int, bc: int) -> FeatureSet:
        key = (br, bc)
        with self._lock:
            fs = self._tiles.get(key)
            if fs is not None:
                self._tiles.move_to_end(key)
                return fs
        fs = self._extract(br, bc)
        with self._lock:
            self._tiles[key] = fs
            while len(self._tiles) > self.cache:
                self._tiles.popitem(last=False)
        return fs

    def crop(self, center_xy, half_m: float) -> FeatureSet:
        """Map keypoints within the axis-aligned square of half-size ``half_m`` around ``center_xy``."""
        p = self.prior
        c = np.asarray(center_xy, dtype=float)
        lo = np.floor((c - half_m - np.asarray(p.origin)) / p.resolution).astype(np.int64)
        hi = np.floor((c + half_m - np.asarray(p.origin)) / p.resolution).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [p.width - 1, p.height - 1])
        if (hi < lo).any():
            return FeatureSet.empty(origin=p.origin, resolution=p.resolution)
        sets = []
        for br in range(lo[1] // self.tile, hi[1] // self.tile + 1):
            for bc in range(lo[0] // self.tile, hi[0] // self.tile + 1):
                sets.append(self.tile_features(br, bc))
        fs = concat_features(sets, p.origin, p.resolution, (p.height, p.width))
        xy = fs.world_xy()
        keep = np.all((xy >= c - half_m) & (xy <= c + half_m), axis=1)
        return fs.subset(np.flatnonzero(keep))


# -- registration stage -----------------------------------------------------------------

@dataclass
class RegistrationOutcome:
    result: RegistrationResult | None
    measured: Pose2D | None
    n_query: int
    n_map: int
    n_matches: int
    radius: float


class FrameRegistrar:
    """Stage B: owns the matcher state (thresholds, offset history)."""

    def __init__(self, settings: PipelineSettings, index: MapFeatureIndex):
        self.settings = settings
        self.index = index
        self.state = settings.matcher_state()
        self.extractor = settings.extractor()

    def query_features(self, img: BevImage) -> FeatureSet:
        return select_top_k(self.extractor.transform(img), self.state.max_keypoints)

    def register(self, img: BevImage, raw2d: Pose2D, prior: Pose2D) -> RegistrationOutcome:
        """``raw2d`` is the odometry pose in the grid frame, ``prior`` its predicted map pose."""
        s = self.settings
        radius = dynamic_radius(self.state)
        q = self.query_features(img)
        # maps grid-frame points into the map under the prediction
        T_prior = se2_compose(prior, raw2d.inverse())
        h, w = img.shape
        half = max(h, w) * img.resolution / 2 + radius
        centre = se2_apply(T_prior, img.center_world)
        mf = self.index.crop(centre, half)
        if len(q) == 0 or len(mf) == 0:
            self.state = update_hysteresis(self.state, 0)
            return RegistrationOutcome(None, None, len(q), len(mf), 0, radius)
        tree = KDTree(mf.descriptors, max_leaf_visits=s.leaf_visits)
        ms = match_descriptors(q, mf, self.state.max_feature_distance, tree=tree, ratio=s.ratio)
        ms = filter_by_radius(ms, radius, prior=T_prior)
        self.state = update_hysteresis(self.state, len(ms))
        res = estimate_se2(ms, s.registration)
        measured = None
        if res.success:
            measured = se2_compose(res.transform, raw2d)
            self.state.record_offset(math.hypot(measured.x - prior.x, measured.y - prior.y))
        return RegistrationOutcome(res, measured, len(q), len(mf), len(ms), radius)


# -- localization ---------------------------------------------------------------------

@dataclass
class FrameInput:
    stamp: float
    cloud: PointCloud
    odom: Pose3D


@dataclass
class FrameRecord:
    index: int
    stamp: float
    pose: Pose2D
    success: bool
    inliers: int
    matches: int
    query_keypoints: int
    map_keypoints: int
    radius: float
    offset: tuple
    applied: tuple
    cap: float

    def to_dict(self) -> dict:
        return {
            "index": self.index, "stamp": self.stamp,
            "pose": [self.pose.x, self.pose.y, self.pose.yaw],
            "success": self.success, "inliers": self.inliers, "matches": self.matches,
            "query_keypoints": self.query_keypoints, "map_keypoints": self.map_keypoints,
            "radius": self.radius, "offset": list(self.offset), "applied": list(self.applied),
            "cap": self.cap,
        }


@dataclass
class _Front:
    index: int
    stamp: float
    odom: Pose3D
    odom2d: Pose2D
    raw2d: Pose2D
    img: BevImage | None


@dataclass
class _Reg:
    front: _Front
    outcome: RegistrationOutcome | None


class Localizer:
    """Runs the three stages over a frame stream; ``run(frames)`` returns per-frame records."""

    def __init__(self, prior: PriorMap, settings: PipelineSettings | None = None,
                 initial_correction: Pose2D = Pose2D(), index: MapFeatureIndex | None = None):
        self.settings = settings or PipelineSettings()
        if abs(prior.resolution - self.settings.segmenter.cell_size) > 1e-9:
            raise ValueError(f"map resolution {prior.resolution} != grid cell size "
                             f"{self.settings.segmenter.cell_size}")
        self.prior = prior
        self.index = index or MapFeatureIndex(prior, self.settings.extractor(), self.settings.map_tile,
                                              self.settings.map_margin)
        self.initial_correction = initial_correction
        self.stage_time = {"front": 0.0, "register": 0.0, "filter": 0.0}

    # stage A
    def _front_stage(self, frames: Iterable[FrameInput]) -> Iterator[_Front]:
        front = BevFrontEnd(self.settings)
        prev, odom2d = None, None
        for i, f in enumerate(frames):
            t0 = time.perf_counter()
            if prev is None:
                odom2d = Pose2D(f.odom.x, f.odom.y, f.odom.yaw)
            else:
                xy, _ = project_to_plane(odom2d.t, np.asarray(f.odom.position) - np.asarray(prev.position))
                odom2d = Pose2D(float(xy[0]), float(xy[1]), f.odom.yaw)
            prev = f.odom
            img = front.step(f.cloud, f.odom, f.stamp) if self.settings.register else None
            self.stage_time["front"] += time.perf_counter() - t0
            yield _Front(i, f.stamp, f.odom, odom2d, Pose2D(f.odom.x, f.odom.y, f.odom.yaw), img)

    # stage B
    def _register(self, reg: FrameRegistrar, fr: _Front, correction: Pose2D) -> _Reg:
        if fr.img is None:
            return _Reg(fr, None)
        t0 = time.perf_counter()
        prior = se2_compose(correction, fr.odom2d)
        out = reg.register(fr.img, fr.raw2d, prior)
        self.stage_time["register"] += time.perf_counter() - t0
        return _Reg(fr, out)

    # stage C
    def _filter(self, pf: PoseFilter, r: _Reg) -> FrameRecord:
        t0 = time.perf_counter()
        fr, out = r.front, r.outcome
        ok = out is not None and out.measured is not None
        n_in = out.result.n_inliers if ok else 0
        info = pf.step(fr.stamp, fr.odom, out.measured if ok else None, n_in)
        self.stage_time["filter"] += time.perf_counter() - t0
        return FrameRecord(fr.index, fr.stamp, info.pose, ok, n_in,
                           out.n_matches if out else 0, out.n_query if out else 0, out.n_map if out else 0,
                           out.radius if out else math.nan, tuple(float(v) for v in info.offset),
                           tuple(float(v) for v in info.applied), float(info.cap))

    def _new_filter(self) -> PoseFilter:
        pf = PoseFilter(self.settings.gamma, self.settings.f_i)
        pf.state.correction = self.initial_correction
        return pf

    def run(self, frames: Iterable[FrameInput], single_thread: bool = False) -> list[FrameRecord]:
        if single_thread:
            return self._run_sequential(frames)
        return self._run_pipelined(frames)

    def _run_sequential(self, frames) -> list[FrameRecord]:
        pf = self._new_filter()
        reg = FrameRegistrar(self.settings, self.index)
        lag = self.settings.lag
        corrections: list[Pose2D] = []
        records = []
        for fr in self._front_stage(frames):
            k = fr.index - lag
            corr = corrections[k] if k >= 0 else self.initial_correction
            rec = self._filter(pf, self._register(reg, fr, corr))
            corrections.append(pf.state.correction)
            records.append(rec)
        return records

    def _run_pipelined(self, frames) -> list[FrameRecord]:
        lag = self.settings.lag
        if lag < 1:
            raise ValueError("pipelined mode needs lag >= 1")
        q_ab: queue.Queue = queue.Queue(maxsize=4)
        q_bc: queue.Queue = queue.Queue(maxsize=4)
        done = object()
        corrections: list[Pose2D] = []
        cond = threading.Condition()
        errors: list[BaseException] = []
        records: list[FrameRecord] = []
        stop = threading.Event()

        def put(q, item):
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def get(q):
            while not stop.is_set():
                try:
                    return q.get(timeout=0.1)
                except queue.Empty:
                    continue
            return done

        def stage_a():
            try:
                for fr in self._front_stage(frames):
                    if not put(q_ab, fr):
                        return
            except BaseException as e:  # forwarded to the caller
                errors.append(e)
                stop.set()
            finally:
                put(q_ab, done)

        def stage_b():
            reg = FrameRegistrar(self.settings, self.index)
            try:
                while True:
                    fr = get(q_ab)
                    if fr is done:
                        break
                    k = fr.index - lag
                    with cond:
                        while k >= 0 and len(corrections) <= k and not stop.is_set():
                            cond.wait(0.1)
                        if stop.is_set():
                            return
                        corr = corrections[k] if k >= 0 else self.initial_correction
                    if not put(q_bc, self._register(reg, fr, corr)):
                        return
            except BaseException as e:
                errors.append(e)
                stop.set()
            finally:
                put(q_bc, done)

        def stage_c():
            pf = self._new_filter()
            try:
                while True:
                    r = get(q_bc)
                    if r is done:
                        break
                    records.append(self._filter(pf, r))
                    with cond:
                        corrections.append(pf.state.correction)
                        cond.notify_all()
            except BaseException as e:
                errors.append(e)
                stop.set()

        threads = [threading.Thread(target=f, name=f"bevloc-{n}", daemon=True)
                   for f, n in ((stage_a, "front"), (stage_b, "register"), (stage_c, "filter"))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return records


def records_to_trajectory(records: list[FrameRecord]) -> Trajectory:
    return Trajectory.from_poses([r.stamp for r in records], [r.pose for r in records])


def planar_odometry(odom: Trajectory) -> Trajectory:
    """Odometry projected onto the plane step by step (the pass-through output)."""
    poses = []
    prev = None
    xy = None
    for i in range(len(odom)):
        p = odom[i]
        if prev is None:
            xy = np.array([p.x, p.y])
        else:
            xy, _ = project_to_plane(xy, np.asarray(p.position) - np.asarray(prev.position))
        poses.append(Pose2D(float(xy[0]), float(xy[1]), p.yaw))
        prev = p
    return Trajectory.from_poses(odom.stamps, poses)
