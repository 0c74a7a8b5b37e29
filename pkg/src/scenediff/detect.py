"""Initial change detection by depth-map differencing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch
from .geom import TriangleMesh
from .render import CameraPose, DepthMap, backproject_pixels, combine_depths, render_depth


@dataclass(frozen=True, eq=False)
class ChangeMask:
    bits: np.ndarray  # (height, width) bool

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True, eq=False)
class ChangePoints:
    points: np.ndarray
    # index of the viewpoint each point was back-projected from
    view_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


def diff_mask(d_s: DepthMap, d_r: DepthMap, tau: float) -> ChangeMask:
    """Pixels observed in both maps whose depths differ by more than `tau`."""
    if d_s.values.shape != d_r.values.shape:
        raise DimensionMismatch(f"{d_s.values.shape} vs {d_r.values.shape}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    a, b = d_s.values, d_r.values
    return ChangeMask((a > 0) & (b > 0) & (np.abs(a - b) > tau))


def changed_points_for_view(d_s: DepthMap, d_r: DepthMap, pose: CameraPose, tau: float):
    mask = diff_mask(d_s, d_r, tau)
    ys, xs = np.nonzero(mask.bits)
    if len(xs) == 0:
        return mask, np.zeros((0, 3))
    depth = combine_depths(d_s, d_r).values[ys, xs]
    return mask, backproject_pixels(xs, ys, depth, pose)


def detect_changes(scan_s: TriangleMesh, scan_r: TriangleMesh, poses, tau: float = 0.05,
                   depth_maps=None) -> ChangePoints:
    """Union over viewpoints of back-projected changed pixels.

    `depth_maps` may carry pre-rendered ``(d_s, d_r)`` pairs, one per pose.
    """
    poses = list(poses)
    if not poses:
        raise ValueError("at least one viewpoint is required")
    chunks, ids = [], []
    for i, pose in enumerate(poses):
        if depth_maps is not None:
            d_s, d_r = depth_maps[i]
        else:
            d_s, d_r = render_depth(scan_s, pose), render_depth(scan_r, pose)
        _, pts = changed_points_for_view(d_s, d_r, pose, tau)
        chunks.append(pts)
        ids.append(np.full(len(pts), i, dtype=np.int64))
    return ChangePoints(np.concatenate(chunks), np.concatenate(ids))
