"""Input validation helpers in the style of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import MissingNormals
from .geom import PointCloud


def check_points(X, name="X", allow_empty=False) -> np.ndarray:
    """Validate an (n, 3) finite float array."""
    arr = check_array(X, dtype=np.float64, ensure_2d=True,
                      ensure_min_samples=0 if allow_empty else 1, input_name=name)
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {arr.shape[1]}")
    return arr


def check_cloud(X, normals=None, colors=None, require_normals=False) -> PointCloud:
    """Coerce array-or-PointCloud input into a validated :class:`PointCloud`."""
    if isinstance(X, PointCloud):
        cloud = X
        if normals is not None or colors is not None:
            cloud = PointCloud(cloud.points,
                               cloud.normals if normals is None else normals,
                               cloud.colors if colors is None else colors)
    else:
        cloud = PointCloud(check_points(X), normals, colors)
    check_points(cloud.points, allow_empty=True)
    if cloud.normals is not None:
        norms = np.linalg.norm(cloud.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("normals must be unit vectors")
    elif require_normals:
        raise MissingNormals("this operation requires per-point normals")
    if cloud.colors is not None and (np.any(cloud.colors < 0) or np.any(cloud.colors > 1)):
        raise ValueError("colors must lie in [0, 1]")
    return cloud


def check_positive(value, name) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value
