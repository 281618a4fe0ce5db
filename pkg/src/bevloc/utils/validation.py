"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from ..geometry import PointCloud


class AlignmentError(ValueError):
    """Two rasters that must share a world origin do not."""


def check_points2d(X, name: str = "X", min_rows: int = 0) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        X = X.reshape(0, 2)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"{name} must be an (N, 2) array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if len(X) < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {len(X)}")
    return X


def check_paired(A, B, names=("query", "map")) -> tuple[np.ndarray, np.ndarray]:
    A = check_points2d(A, names[0])
    B = check_points2d(B, names[1])
    if len(A) != len(B):
        raise ValueError(f"{names[0]} and {names[1]} differ in length: {len(A)} vs {len(B)}")
    return A, B


def check_cloud(cloud) -> PointCloud:
    if isinstance(cloud, PointCloud):
        return cloud
    return PointCloud(np.asarray(cloud, dtype=np.float32))


def check_descriptors(D, dim: int = 128) -> np.ndarray:
    D = np.asarray(D, dtype=np.float32)
    if D.size == 0:
        return D.reshape(0, dim)
    if D.ndim != 2 or D.shape[1] != dim:
        raise ValueError(f"descriptors must be (N, {dim}), got {D.shape}")
    return D


def check_unit_interval(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size and (np.nanmin(a) < 0 or np.nanmax(a) > 1):
        raise ValueError(f"{name} must lie in [0, 1]")
    return a
