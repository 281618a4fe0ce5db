"""Keypoints and 128-d descriptors on BEV images.

The built-in extractor runs OpenCV's SIFT on the 8-bit intensity channel.  A
file interface takes features from an external (learned) extractor.

Sidecar format for external features: one ASCII header line
``BEVFEAT 1 <count> <dim>\\n`` followed by ``count`` little-endian float32
records ``u, v, scale, repeatability, reliability, d_0 .. d_{dim-1}``.
``u`` is the column and ``v`` the row of the keypoint in the query raster.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .bev import BevImage
from .io import MalformedFileError

DESCRIPTOR_DIM = 128
SIDECAR_MAGIC = "BEVFEAT"


class UnsupportedDescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    scale: float
    orientation: float
    score: float


@dataclass(eq=False)
class FeatureSet:
    """Keypoints as parallel arrays; ``uv`` holds (col, row) subpixel positions."""

    uv: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray
    score: np.ndarray
    descriptors: np.ndarray
    source: str = "builtin_sift"
    origin: tuple = (0.0, 0.0)
    resolution: float = 0.33
    shape: tuple = (0, 0)
    octave: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        n = len(self.uv)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(n)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(n)
        d = np.asarray(self.descriptors, dtype=np.float32)
        self.descriptors = d.reshape(n, d.shape[-1] if d.ndim == 2 else DESCRIPTOR_DIM)
        if self.octave is None:
            self.octave = np.zeros(n, dtype=np.int64)
        if n and (self.score < 0).any():
            raise ValueError("keypoint scores must be non-negative")

    def __len__(self) -> int:
        return len(self.uv)

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(u, v, s, o, sc) for (u, v), s, o, sc in
                zip(self.uv.tolist(), self.scale.tolist(), self.orientation.tolist(), self.score.tolist())]

    def world_xy(self) -> np.ndarray:
        return np.asarray(self.origin) + (self.uv + 0.5) * self.resolution

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.uv[idx], self.scale[idx], self.orientation[idx], self.score[idx],
                          self.descriptors[idx], self.source, self.origin, self.resolution,
                          self.shape, self.octave[idx])

    @classmethod
    def empty(cls, source="builtin_sift", origin=(0.0, 0.0), resolution=0.33, shape=(0, 0),
              dim=DESCRIPTOR_DIM) -> "FeatureSet":
        z = np.zeros(0)
        return cls(np.zeros((0, 2)), z, z, z, np.zeros((0, dim), np.float32), source, origin,
                   resolution, shape)


def _rank(fs: FeatureSet) -> np.ndarray:
    # highest score first, ties by u then v ascending
    return np.lexsort((fs.uv[:, 1], fs.uv[:, 0], -fs.score))


def select_top_k(fs: FeatureSet, k: int) -> FeatureSet:
    if k < 0:
        raise ValueError("k must be >= 0")
    return fs.subset(_rank(fs)[:k])


def _window_invalid_fraction(mask: np.ndarray, uv: np.ndarray, half: np.ndarray) -> np.ndarray:
    """Fraction of invalid pixels in square windows; pixels off the image count as invalid."""
    h, w = mask.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    c = np.rint(uv[:, 0]).astype(np.int64)
    r = np.rint(uv[:, 1]).astype(np.int64)
    hw = np.maximum(np.ceil(half).astype(np.int64), 1)
    area = (2 * hw + 1) ** 2
    r0, r1 = np.clip(r - hw, 0, h), np.clip(r + hw + 1, 0, h)
    c0, c1 = np.clip(c - hw, 0, w), np.clip(c + hw + 1, 0, w)
    valid = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
    return 1.0 - valid / area


def _decode_octave(raw: int) -> int:
    octave = raw & 255
    return octave - 256 if octave >= 128 else octave


def extract_sift(img: BevImage, n_octaves: int = 4, n_layers: int = 3,
                 contrast_threshold: float = 0.01, edge_threshold: float = 10.0,
                 sigma: float = 1.6, max_invalid_fraction: float = 0.5,
                 window_scale: float = 3.0) -> FeatureSet:
    """SIFT keypoints and unit-norm descriptors from the intensity channel.

    Masked-out pixels are zero.  Keypoints whose square support window
    (half-width ``window_scale * size``) is more than ``max_invalid_fraction``
    invalid are dropped.  OpenCV doubles the base image, so octaves
    ``-1 .. n_octaves - 2`` are kept.
    """
    meta = dict(origin=img.origin, resolution=img.resolution, shape=img.shape)
    if not img.mask.any():
        return FeatureSet.empty(**meta)
    gray = np.where(img.mask, np.clip(img.intensity, 0, 1), 0.0)
    gray8 = np.floor(gray * 255.0 + 0.5).astype(np.uint8)
    if gray8.min() == gray8.max():
        return FeatureSet.empty(**meta)
    sift = cv2.SIFT_create(nfeatures=0, nOctaveLayers=n_layers, contrastThreshold=contrast_threshold,
                           edgeThreshold=edge_threshold, sigma=sigma, enable_precise_upscale=True)
    kps, desc = sift.detectAndCompute(gray8, None)
    if not kps:
        return FeatureSet.empty(**meta)
    uv = np.array([k.pt for k in kps], dtype=np.float64)
    size = np.array([k.size for k in kps], dtype=np.float64)
    angle = np.deg2rad(np.array([k.angle for k in kps], dtype=np.float64))
    response = np.abs(np.array([k.response for k in kps], dtype=np.float64))
    octave = np.array([_decode_octave(k.octave) for k in kps], dtype=np.int64)

    keep = (octave >= -1) & (octave <= n_octaves - 2)
    keep &= _window_invalid_fraction(img.mask, uv, window_scale * size) <= max_invalid_fraction
    desc = desc.astype(np.float32)
    norms = np.linalg.norm(desc, axis=1)
    keep &= norms > 0
    desc = desc / np.where(norms > 0, norms, 1.0)[:, None]
    fs = FeatureSet(uv[keep], size[keep], angle[keep], response[keep], desc[keep],
                    octave=octave[keep], **meta)
    # fixed order regardless of how the detector enumerated keypoints
    return fs.subset(_rank(fs))


def load_external_features(path, img: BevImage | None = None) -> FeatureSet:
    """Read a sidecar feature file; score = repeatability * reliability."""
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise MalformedFileError(f"{path}: missing header line")
    parts = data[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != SIDECAR_MAGIC or parts[1] != "1":
        raise MalformedFileError(f"{path}: bad header {data[:nl]!r}")
    try:
        count, dim = int(parts[2]), int(parts[3])
    except ValueError:
        raise MalformedFileError(f"{path}: bad header {data[:nl]!r}")
    if dim != DESCRIPTOR_DIM:
        raise UnsupportedDescriptorError(f"{path}: descriptor dim {dim}, only {DESCRIPTOR_DIM} supported")
    body = data[nl + 1:]
    rec = 5 + dim
    if count < 0 or len(body) != count * rec * 4:
        raise MalformedFileError(f"{path}: header announces {count} records, body holds "
                                 f"{len(body) / (rec * 4):g}")
    meta = {} if img is None else dict(origin=img.origin, resolution=img.resolution, shape=img.shape)
    if count == 0:
        return FeatureSet.empty(source="external", **meta)
    arr = np.frombuffer(body, dtype="<f4").reshape(count, rec).astype(np.float64)
    if not np.isfinite(arr).all():
        raise MalformedFileError(f"{path}: non-finite values")
    score = arr[:, 3] * arr[:, 4]
    return FeatureSet(arr[:, :2], arr[:, 2], np.zeros(count), np.maximum(score, 0.0),
                      arr[:, 5:].astype(np.float32), source="external", **meta)


def save_external_features(path, uv, scale, repeatability, reliability, descriptors) -> None:
    descriptors = np.asarray(descriptors, dtype=np.float32)
    n = len(descriptors)
    dim = descriptors.shape[1] if descriptors.ndim == 2 else DESCRIPTOR_DIM
    rec = np.column_stack([np.asarray(uv, float).reshape(n, 2), np.asarray(scale, float).reshape(n),
                           np.asarray(repeatability, float).reshape(n),
                           np.asarray(reliability, float).reshape(n),
                           descriptors.reshape(n, dim)]).astype("<f4")
    Path(path).write_bytes(f"{SIDECAR_MAGIC} 1 {n} {dim}\n".encode("ascii") + rec.tobytes())


class SiftExtractor(BaseEstimator, TransformerMixin):
    """``transform(img)`` -> FeatureSet; ``k`` caps the keypoint count (None keeps all)."""

    def __init__(self, n_octaves=4, n_layers=3, contrast_threshold=0.01, edge_threshold=10.0,
                 sigma=1.6, max_invalid_fraction=0.5, k=1000):
        self.n_octaves = n_octaves
        self.n_layers = n_layers
        self.contrast_threshold = contrast_threshold
        self.edge_threshold = edge_threshold
        self.sigma = sigma
        self.max_invalid_fraction = max_invalid_fraction
        self.k = k

    def fit(self, X=None, y=None):
        return self

    def transform(self, img: BevImage) -> FeatureSet:
        fs = extract_sift(img, self.n_octaves, self.n_layers, self.contrast_threshold,
                          self.edge_threshold, self.sigma, self.max_invalid_fraction)
        return fs if self.k is None else select_top_k(fs, self.k)


def concat_features(sets, origin=(0.0, 0.0), resolution: float = 0.33, shape=(0, 0)) -> FeatureSet:
    """Stack feature sets into one frame with a common ``origin``; positions are re-expressed."""
    sets = [s for s in sets if len(s)]
    if not sets:
        return FeatureSet.empty(origin=origin, resolution=resolution, shape=shape)
    o = np.asarray(origin, dtype=float)
    uv = np.concatenate([s.uv + (np.asarray(s.origin) - o) / resolution for s in sets])
    return FeatureSet(uv, np.concatenate([s.scale for s in sets]),
                      np.concatenate([s.orientation for s in sets]),
                      np.concatenate([s.score for s in sets]),
                      np.concatenate([s.descriptors for s in sets]), sets[0].source, tuple(o),
                      resolution, shape, np.concatenate([s.octave for s in sets]))
