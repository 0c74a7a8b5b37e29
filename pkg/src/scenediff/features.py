"""FPFH descriptors, cross-scan nearest-neighbour matching and static filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import MissingNormals
from .geom import PointCloud, SpatialIndex, voxel_downsample

N_BINS = 11
DESCRIPTOR_SIZE = 3 * N_BINS
# each sub-histogram of the final descriptor sums to this value
HIST_TOTAL = 100.0


def _radius_pairs(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed neighbour pairs (i, j), i != j, with their distances."""
    tree = cKDTree(points)
    dm = tree.sparse_distance_matrix(tree, radius, output_type="coo_matrix")
    i, j, d = dm.row.astype(np.int64), dm.col.astype(np.int64), dm.data
    keep = i != j
    # sparse_distance_matrix drops exact zeros; add back duplicated positions
    pairs = tree.query_pairs(0.0, output_type="ndarray") if len(points) else np.zeros((0, 2), int)
    if len(pairs):
        i = np.concatenate([i[keep], pairs[:, 0], pairs[:, 1]])
        j = np.concatenate([j[keep], pairs[:, 1], pairs[:, 0]])
        d = np.concatenate([d[keep], np.zeros(2 * len(pairs))])
    else:
        i, j, d = i[keep], j[keep], d[keep]
    order = np.lexsort((j, i))
    return i[order], j[order], d[order]


_SNAP = 1e-9


def _snap(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < _SNAP, 0.0, x)


def pair_features(p1, n1, p2, n2) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Darboux-frame angles (theta, alpha, phi) for rows of point/normal pairs.

    The source of the frame is whichever endpoint has the smaller angle
    between its normal and the connecting line. Returns a validity mask
    that is False for coincident points or degenerate frames.

    Values within ``1e-9`` of a decision boundary (the source choice, the
    atan2 arguments) are snapped so that exact configurations such as
    perpendicular faces along a crease resolve the same way in any frame.
    """
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    ok = dist > 0
    safe = np.where(ok, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / safe
    a2 = np.einsum("ij,ij->i", n2, dp) / safe
    swap = (np.arccos(np.clip(np.abs(a1), 0, 1))
            > np.arccos(np.clip(np.abs(a2), 0, 1)) + _SNAP)
    src_n = np.where(swap[:, None], n2, n1)
    dst_n = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    phi = np.where(swap, -a2, a1)

    v = np.cross(dp, src_n)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > _SNAP * safe
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(src_n, v)
    alpha = np.einsum("ij,ij->i", v, dst_n)
    theta = np.arctan2(_snap(np.einsum("ij,ij->i", w, dst_n)),
                       _snap(np.einsum("ij,ij->i", src_n, dst_n)))
    return theta, alpha, phi, ok


def _bin(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    b = np.floor(N_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def _normalise(hist: np.ndarray) -> np.ndarray:
    out = hist.copy()
    for s in range(3):
        block = out[:, s * N_BINS:(s + 1) * N_BINS]
        total = block.sum(axis=1, keepdims=True)
        block *= np.where(total > 0, HIST_TOTAL / np.where(total > 0, total, 1.0), 0.0)
    return out


def compute_fpfh(cloud: PointCloud, radius: float) -> np.ndarray:
    """Fast point feature histograms, one 33-bin row per point.

    Sub-histograms over theta, alpha and phi use 11 bins each. The final
    descriptor is ``SPFH(p) + 1/k * sum_k SPFH(p_k) / ||p - p_k||`` with each
    sub-histogram rescaled to sum to 100. Points with fewer than two
    neighbours inside `radius` get an all-zero row.
    """
    if cloud.normals is None:
        raise MissingNormals("FPFH needs per-point normals")
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    out = np.zeros((n, DESCRIPTOR_SIZE))
    if n == 0:
        return out

    i, j, d = _radius_pairs(pts, radius)
    n_nb = np.bincount(i, minlength=n)

    theta, alpha, phi, ok = pair_features(pts[i], nrm[i], pts[j], nrm[j])
    bins = np.stack([_bin(theta, -np.pi, np.pi),
                     N_BINS + _bin(alpha, -1.0, 1.0),
                     2 * N_BINS + _bin(phi, -1.0, 1.0)], axis=1)
    spfh = np.zeros((n, DESCRIPTOR_SIZE))
    rows = np.repeat(i[ok], 3)
    np.add.at(spfh, (rows, bins[ok].reshape(-1)), 1.0)
    spfh = _normalise(spfh)

    # neighbour aggregation, skipping coincident neighbours
    far = d > 0
    weights = np.zeros(len(i))
    weights[far] = 1.0 / d[far]
    agg = np.zeros((n, DESCRIPTOR_SIZE))
    np.add.at(agg, i[far], spfh[j[far]] * weights[far, None])
    k = np.maximum(n_nb, 1)[:, None]
    out = spfh + agg / k
    out = _normalise(out)
    out[n_nb < 2] = 0.0
    return out


@dataclass(frozen=True)
class Correspondence:
    index_s: int
    index_r: int
    distance_feature: float


class Correspondences:
    """Column-oriented list of correspondences between two clouds."""

    def __init__(self, index_s, index_r, distance_feature=None):
        self.index_s = np.asarray(index_s, dtype=np.int64).reshape(-1)
        self.index_r = np.asarray(index_r, dtype=np.int64).reshape(-1)
        if distance_feature is None:
            distance_feature = np.zeros(len(self.index_s))
        self.distance_feature = np.asarray(distance_feature, dtype=np.float64).reshape(-1)
        if not (len(self.index_s) == len(self.index_r) == len(self.distance_feature)):
            raise ValueError("correspondence columns differ in length")

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def __len__(self):
        return len(self.index_s)

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Correspondence(int(self.index_s[key]), int(self.index_r[key]),
                                  float(self.distance_feature[key]))
        return Correspondences(self.index_s[key], self.index_r[key], self.distance_feature[key])

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __eq__(self, other):
        if not isinstance(other, Correspondences):
            return NotImplemented
        return (np.array_equal(self.index_s, other.index_s)
                and np.array_equal(self.index_r, other.index_r)
                and np.array_equal(self.distance_feature, other.distance_feature))

    def __repr__(self):
        return f"Correspondences(n={len(self)})"

    def endpoints(self, cloud_s, cloud_r) -> tuple[np.ndarray, np.ndarray]:
        ps = cloud_s.points if isinstance(cloud_s, PointCloud) else np.asarray(cloud_s)
        pr = cloud_r.points if isinstance(cloud_r, PointCloud) else np.asarray(cloud_r)
        return ps[self.index_s], pr[self.index_r]


def match_features(desc_s, desc_r) -> Correspondences:
    """Nearest reference descriptor for every rescan descriptor."""
    ds = np.asarray(desc_s, dtype=np.float64)
    dr = np.asarray(desc_r, dtype=np.float64)
    if len(ds) == 0 or len(dr) == 0:
        raise ValueError("both descriptor sets must be nonempty")
    if ds.shape[1] != dr.shape[1]:
        raise ValueError("descriptor lengths differ")
    idx, dist = SpatialIndex(ds).query(dr)
    return Correspondences(idx, np.arange(len(dr)), dist)


def filter_static(corrs: Correspondences, cloud_s, cloud_r, delta_static: float) -> Correspondences:
    """Drop matches whose 3D endpoints lie closer than `delta_static`."""
    if not delta_static > 0:
        raise ValueError("delta_static must be positive")
    if len(corrs) == 0:
        return corrs
    ps, pr = corrs.endpoints(cloud_s, cloud_r)
    return corrs[np.linalg.norm(ps - pr, axis=1) >= delta_static]


def filter_persistent(corrs: Correspondences, cloud_s, cloud_r, radius: float,
                      index_s: SpatialIndex | None = None,
                      index_r: SpatialIndex | None = None) -> Correspondences:
    """Drop matches touching surface that exists in both scans.

    A reference endpoint with rescan geometry within `radius`, or a rescan
    endpoint with reference geometry within `radius`, sits on unchanged
    surface. Such points get their descriptors from moved neighbours (floor
    next to a moved box) and would otherwise feed spurious motions.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if len(corrs) == 0:
        return corrs
    ps, pr = corrs.endpoints(cloud_s, cloud_r)
    index_s = index_s or SpatialIndex(cloud_s.points if isinstance(cloud_s, PointCloud) else cloud_s)
    index_r = index_r or SpatialIndex(cloud_r.points if isinstance(cloud_r, PointCloud) else cloud_r)
    persistent = index_r.within(ps, radius) | index_s.within(pr, radius)
    return corrs[~persistent]


def downsample_for_matching(cloud: PointCloud, grid: float) -> np.ndarray:
    """Indices of one representative point per occupied grid cell.

    The representative is the member closest to the cell's centroid, so
    normals stay those of real surface points instead of crease averages.
    Indices are returned in ascending order.
    """
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    centroids, inverse = voxel_downsample(PointCloud(cloud.points), grid)
    d2 = np.sum((cloud.points - centroids.points[inverse]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(d2)), d2, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    return np.sort(order[first])


def augment_descriptors(desc, points=None, colors=None, spatial_weight: float = 0.0,
                        color_weight: float = 0.0) -> np.ndarray:
    """Append ``color_weight * rgb`` and ``spatial_weight * xyz`` to each row.

    Color separates faces that geometry alone cannot (the sides of a
    symmetric box). A small spatial weight only breaks near-ties, which
    keeps repetitive static structure matched to itself.
    """
    parts = [np.asarray(desc, dtype=np.float64)]
    if color_weight > 0 and colors is not None:
        parts.append(color_weight * np.asarray(colors, dtype=np.float64))
    if spatial_weight > 0 and points is not None:
        parts.append(spatial_weight * np.asarray(points, dtype=np.float64))
    return np.hstack(parts) if len(parts) > 1 else parts[0]
