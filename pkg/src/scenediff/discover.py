"""Object discovery: 26-connected components of changed voxels."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geom import voxel_keys

MIN_OBJECT_VOXELS = 3


@dataclass(frozen=True, eq=False)
class DetectedObject:
    id: int
    voxels: frozenset
    points: np.ndarray
    cell_size: float
    transform_id: int | None = None
    point_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def voxel_count(self) -> int:
        return len(self.voxels)

    def bounding_box(self) -> tuple[list, list]:
        return self.points.min(axis=0).tolist(), self.points.max(axis=0).tolist()

    def with_transform(self, transform_id):
        return replace(self, transform_id=transform_id)

    def to_dict(self) -> dict:
        lo, hi = self.bounding_box() if len(self.points) else ([], [])
        return {
            "id": self.id,
            "voxel_count": self.voxel_count,
            "point_count": int(len(self.points)),
            "bbox_min": lo,
            "bbox_max": hi,
            "transform_id": self.transform_id,
        }


def label_voxels(keys: np.ndarray) -> np.ndarray:
    """26-connected component label (0-based) for each row of unique voxel keys."""
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    lo = keys.min(axis=0)
    local = keys - lo
    grid = np.zeros(local.max(axis=0) + 1, dtype=bool)
    grid[tuple(local.T)] = True
    labels, _ = ndimage.label(grid, structure=np.ones((3, 3, 3), dtype=bool))
    return labels[tuple(local.T)].astype(np.int64) - 1


def connected_components(changed_points, cell_size: float = 0.1,
                         min_voxels: int = MIN_OBJECT_VOXELS) -> list[DetectedObject]:
    """Group changed points into objects by voxel connectivity.

    Components smaller than `min_voxels` are dropped. Objects are ordered by
    descending voxel count, ties by smallest voxel key, so the result does
    not depend on input point order.
    """
    pts = np.asarray(changed_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return []
    keys = voxel_keys(pts, cell_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    comp = label_voxels(uniq)
    n_comp = comp.max() + 1

    groups = []
    for c in range(n_comp):
        vox_rows = np.flatnonzero(comp == c)
        if len(vox_rows) < min_voxels:
            continue
        # vox_rows is sorted, so uniq[vox_rows[0]] is the smallest key
        groups.append((-len(vox_rows), tuple(uniq[vox_rows[0]].tolist()), c, vox_rows))
    groups.sort(key=lambda g: (g[0], g[1]))

    point_comp = comp[inverse]
    objects = []
    for new_id, (_, _, c, vox_rows) in enumerate(groups):
        members = np.flatnonzero(point_comp == c)
        # canonical point order: lexicographic, so permuted inputs give equal objects
        order = np.lexsort(pts[members].T[::-1])
        members = members[order]
        objects.append(DetectedObject(
            id=new_id,
            voxels=frozenset(map(tuple, uniq[vox_rows].tolist())),
            points=pts[members],
            cell_size=cell_size,
            point_indices=members,
        ))
    return objects

