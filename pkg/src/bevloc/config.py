"""Sensor profiles and the structured run configuration.

Config files are YAML with one section per stage::

    sensor: OS2-128
    extractor: sift
    seed: 0
    segmenter: {h_g: 0.3, h_o: 0.1, grid_size: 301}
    matcher: {r_max: 20.0}
    registrar: {noise_bound: 0.66, estimator: gnc}
    filter: {gamma: 0.3}

Any value can be overridden from the environment with ``BEVLOC_<SECTION>__<KEY>``
(e.g. ``BEVLOC_REGISTRAR__NOISE_BOUND=0.5``); top-level keys use ``BEVLOC_<KEY>``.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

log = logging.getLogger(__name__)

ENV_PREFIX = "BEVLOC_"

# Ground segmentation parameters per sensor (d_sf, t_minv, theta [deg], g_minp,
# o_minc [m], h_g [m], h_o [m], s, o_t, d_ps, d_pv, v_np).
SEGMENTER_PROFILES: dict[str, dict[str, float]] = {
    "HDL-64E": dict(d_sf=0.00010, t_minv=0.0005, theta=5, g_minp=0.250, o_minc=1.25, h_g=0.30,
                    h_o=0.10, s=20, o_t=0.1, d_ps=20.0, d_pv=0.2, v_np=10),
    "OS1-64": dict(d_sf=0.00015, t_minv=0.0001, theta=5, g_minp=0.125, o_minc=1.25, h_g=0.35,
                   h_o=0.15, s=10, o_t=0.1, d_ps=15.0, d_pv=0.1, v_np=10),
    "OS2-128": dict(d_sf=0.00010, t_minv=0.0005, theta=5, g_minp=0.250, o_minc=1.25, h_g=0.30,
                    h_o=0.10, s=20, o_t=0.1, d_ps=30.0, d_pv=0.2, v_np=10),
    "Aeva": dict(d_sf=0.00010, t_minv=0.0005, theta=5, g_minp=0.250, o_minc=1.25, h_g=0.30,
                 h_o=0.10, s=20, o_t=0.1, d_ps=20.0, d_pv=0.2, v_np=10),
    "Avia": dict(d_sf=0.00100, t_minv=0.0005, theta=10, g_minp=0.125, o_minc=0.50, h_g=0.30,
                 h_o=0.10, s=40, o_t=0.1, d_ps=7.5, d_pv=0.2, v_np=10),
}

# BEV normalization factors (I_c, S_c, V_c) per sensor.
NORMALIZATION_PROFILES: dict[str, tuple[float, float, float]] = {
    "HDL-64E": (2.670, 0.09, 0.35),
    "OS1-64": (1.000, 0.10, 0.35),
    "OS2-128": (0.005, 0.10, 0.35),
    "Aeva": (0.013, 0.10, 0.35),
    "Avia": (0.020, 0.09, 0.35),
    # synthetic sensor reports reflectance already in [0, 1]
    "synthetic": (1.000, 0.10, 0.35),
}

# correction factor f_i per extractor
CORRECTION_FACTORS = {"external": 15.0, "r2d2": 15.0, "sift": 25.0}

IGNORED_SEGMENTER_KEYS = ("d_sf", "t_minv", "g_minp", "s", "o_t", "d_ps", "d_pv")


@dataclass
class SegmenterConfig:
    """Ground segmentation settings.

    Keys consumed by the simplified segmenter:

    ``theta``      max terrain slope in degrees, used as height allowance over the
                   obstacle window (tan(theta) * obstacle_window)
    ``o_minc``     max |cell height - 8-neighbour median| for a ground cell [m]
    ``h_g``        max z-spread of a cell's lowest ``v_np`` points [m]; also the
                   base allowance over the local minimum in the obstacle window
    ``h_o``        points up to this height above the cell ground are ground [m]
    ``v_np``       number of lowest points forming the per-cell ground estimate
    ``grid_size``  cells per side (odd), ``cell_size`` in m
    ``obstacle_window``  radius [m] of the local-minimum window

    ``d_sf, t_minv, g_minp, s, o_t, d_ps, d_pv`` are accepted for compatibility
    and ignored.
    """

    d_sf: float = 0.00010
    t_minv: float = 0.0005
    theta: float = 5.0
    g_minp: float = 0.250
    o_minc: float = 1.25
    h_g: float = 0.30
    h_o: float = 0.10
    s: float = 20
    o_t: float = 0.1
    d_ps: float = 20.0
    d_pv: float = 0.2
    v_np: int = 10
    grid_size: int = 301
    cell_size: float = 0.33
    obstacle_window: float = 2.0

    def __post_init__(self):
        self.v_np = int(self.v_np)
        self.grid_size = int(self.grid_size)
        for name in ("o_minc", "h_g", "h_o", "cell_size", "obstacle_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"segmenter.{name} must be positive")
        if self.v_np < 1 or self.grid_size < 3:
            raise ValueError("segmenter.v_np must be >= 1 and grid_size >= 3")
        if self.grid_size % 2 == 0:
            raise ValueError("segmenter.grid_size must be odd so the sensor cell is centred")

    @classmethod
    def for_sensor(cls, name: str, **overrides) -> "SegmenterConfig":
        base = dict(SEGMENTER_PROFILES.get(name, SEGMENTER_PROFILES["HDL-64E"]))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any], sensor: str | None = None) -> "SegmenterConfig":
        d = dict(d)
        if "θ" in d:
            d["theta"] = d.pop("θ")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown segmenter keys: {sorted(unknown)}")
        ignored = sorted(k for k in d if k in IGNORED_SEGMENTER_KEYS)
        if ignored:
            log.warning("segmenter keys %s are accepted but ignored by this segmenter", ignored)
        return cls.for_sensor(sensor, **d) if sensor else cls(**d)


@dataclass(frozen=True)
class NormalizationFactors:
    I_c: float = 1.0
    S_c: float = 0.1
    V_c: float = 0.35

    def __post_init__(self):
        if min(self.I_c, self.S_c, self.V_c) <= 0:
            raise ValueError("normalization factors must be positive")

    @classmethod
    def for_sensor(cls, name: str) -> "NormalizationFactors":
        try:
            return cls(*NORMALIZATION_PROFILES[name])
        except KeyError:
            raise KeyError(f"unknown sensor profile {name!r}; known: {sorted(NORMALIZATION_PROFILES)}")


@dataclass
class RunConfig:
    sensor: str = "synthetic"
    extractor: str = "sift"
    seed: int = 0
    segmenter: dict = field(default_factory=dict)
    bev: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    matcher: dict = field(default_factory=dict)
    registrar: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)
    map: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sensor not in NORMALIZATION_PROFILES:
            raise ValueError(f"unknown sensor profile {self.sensor!r}")
        if self.extractor not in ("sift", "external"):
            raise ValueError(f"unknown extractor {self.extractor!r}")

    def segmenter_config(self) -> SegmenterConfig:
        profile = self.sensor if self.sensor in SEGMENTER_PROFILES else None
        return SegmenterConfig.from_mapping(self.segmenter, sensor=profile)

    def normalization(self) -> NormalizationFactors:
        over = {k: v for k, v in self.bev.items() if k in ("I_c", "S_c", "V_c")}
        return dataclasses.replace(NormalizationFactors.for_sensor(self.sensor), **over)

    def correction_factor(self) -> float:
        return float(self.filter.get("f_i", CORRECTION_FACTORS[self.extractor]))


def _coerce(value: str):
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def apply_env_overrides(data: dict, environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if len(path) == 1:
            data[path[0]] = _coerce(raw)
        elif len(path) == 2:
            data.setdefault(path[0], {})[path[1]] = _coerce(raw)
    return data


def load_config(path=None, environ: Mapping[str, str] | None = None, **overrides) -> RunConfig:
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config root must be a mapping")
        data.update(loaded)
    data = apply_env_overrides(data, environ)
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(**data)
