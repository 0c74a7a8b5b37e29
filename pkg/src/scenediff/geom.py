"""Geometric primitives: rigid transforms, clouds, meshes, spatial index, voxels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateInput, EmptyIndex

_ORTHO_TOL = 1e-6


def as_points(points) -> np.ndarray:
    """Return `points` as a float64 array of shape (n, 3)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {arr.shape}")
    return arr


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_angle(rotation: np.ndarray) -> float:
    """Angle in radians of the rotation represented by a 3x3 matrix."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def is_rotation(matrix: np.ndarray, tol: float = _ORTHO_TOL) -> bool:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(m) - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation followed by translation: ``p -> R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    @property
    def angle(self) -> float:
        """Rotation angle in radians."""
        return rotation_angle(self.rotation)

    def is_valid(self, tol: float = _ORTHO_TOL) -> bool:
        return is_rotation(self.rotation, tol) and bool(np.all(np.isfinite(self.translation)))

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform":
        return cls(np.asarray(data["rotation"]).reshape(3, 3), data["translation"])

    def __repr__(self):
        return (
            f"RigidTransform(angle={np.degrees(self.angle):.3f}deg, "
            f"translation={np.array2string(self.translation, precision=4)})"
        )


def apply_transform(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def fit_rigid(source_points, target_points) -> RigidTransform:
    """Least-squares rigid transform mapping `source_points` onto `target_points`.

    Closed-form SVD solution of ``min sum ||R s_i + t - t_i||^2`` without
    scale. A reflection is suppressed by flipping the sign attached to the
    smallest singular value.
    """
    src = as_points(source_points)
    dst = as_points(target_points)
    if src.shape != dst.shape:
        raise DegenerateInput(f"point lists differ in length: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {len(src)}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[1] <= 1e-10 * scale:
        raise DegenerateInput("source points are collinear or coincident")

    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, mu_d - rot @ mu_s)


_TREE_MAX_DIM = 8
_BRUTE_CHUNK = 2048


def _brute_nearest(data: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbours for high-dimensional vectors.

    Squared distances come from the BLAS expansion; every candidate within
    rounding slack of the row minimum is then re-measured directly so the
    result and its lowest-index tie-break match a linear scan.
    """
    sq_data = np.einsum("ij,ij->i", data, data)
    out_i = np.empty(len(queries), dtype=np.int64)
    out_d = np.empty(len(queries))
    for start in range(0, len(queries), _BRUTE_CHUNK):
        q = queries[start:start + _BRUTE_CHUNK]
        sq_q = np.einsum("ij,ij->i", q, q)
        d2 = sq_q[:, None] + sq_data[None, :] - 2.0 * (q @ data.T)
        lo = d2.min(axis=1)
        slack = 1e-9 * (sq_q + sq_data.max()) + 1e-12
        near = d2 <= (lo + slack)[:, None]
        unique = near.sum(axis=1) == 1
        rows = np.flatnonzero(unique)
        best = np.argmax(near[rows], axis=1)
        out_i[start + rows] = best
        out_d[start + rows] = np.sqrt(np.sum((data[best] - q[rows]) ** 2, axis=1))
        for r in np.flatnonzero(~unique):
            cand = np.flatnonzero(near[r])
            exact = np.sqrt(np.sum((data[cand] - q[r]) ** 2, axis=1))
            m = exact.min()
            out_i[start + r] = cand[exact == m].min()
            out_d[start + r] = m
    return out_i, out_d


class SpatialIndex:
    """Exact nearest-neighbour index over a fixed set of (n, d) vectors.

    Ties between equidistant points resolve to the lowest point index.
    Built once, then safe for concurrent read-only queries.
    """

    def __init__(self, points):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 3) if arr.size else np.zeros((0, 3))
        self.points = arr
        self.dim = arr.shape[1]
        self._tree = cKDTree(arr) if len(arr) else None

    def __len__(self):
        return len(self.points)

    def _queries(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        return q.reshape(-1, self.dim)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest index and Euclidean distance for every query row."""
        if self._tree is None:
            raise EmptyIndex("spatial index is empty")
        q = self._queries(queries)
        if self.dim > _TREE_MAX_DIM:
            return _brute_nearest(self.points, q)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.astype(np.int64), dist
        best_d = dist[:, 0]
        tied = dist == best_d[:, None]
        idx = np.where(tied, idx, np.iinfo(np.int64).max)
        best_i = idx.min(axis=1)
        full_tie = tied.all(axis=1)
        if k < len(self.points) and np.any(full_tie):
            for row in np.flatnonzero(full_tie):
                cand = self._tree.query_ball_point(q[row], best_d[row] * (1 + 1e-9) + 1e-300)
                if not cand:
                    continue
                # compare candidates with one formula; the tree's own distance
                # can differ from it in the last bit
                cand = np.sort(np.asarray(cand, dtype=np.int64))
                d = np.linalg.norm(self.points[cand] - q[row], axis=1)
                best_i[row] = cand[np.flatnonzero(d == d.min())[0]]
        return best_i.astype(np.int64), best_d

    def distances(self, queries) -> np.ndarray:
        """Distance to the nearest indexed point."""
        if self._tree is None:
            raise EmptyIndex("spatial index is empty")
        d, _ = self._tree.query(self._queries(queries), k=1)
        return d

    def within(self, queries, radius: float) -> np.ndarray:
        """Boolean mask: does each query have an indexed point within `radius`."""
        q = self._queries(queries)
        if self._tree is None:
            return np.zeros(len(q), dtype=bool)
        d, _ = self._tree.query(q, k=1, distance_upper_bound=radius * (1 + 1e-12))
        return np.isfinite(d)


def nearest_neighbor(index: SpatialIndex, query) -> tuple[int, float]:
    idx, dist = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(dist[0])


def voxel_keys(points, cell_size: float) -> np.ndarray:
    """Integer voxel key for each point, ``floor(p / cell_size)``, shape (n, 3)."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.floor(pts / cell_size).astype(np.int64)


def voxelize(points, cell_size: float) -> set[tuple[int, int, int]]:
    keys = voxel_keys(points, cell_size)
    return set(map(tuple, np.unique(keys, axis=0).tolist()))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        for name in ("normals", "colors"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
            if len(arr) != len(pts):
                raise ValueError(f"{name} has {len(arr)} rows but cloud has {len(pts)} points")
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
        )

    def transformed(self, t: RigidTransform) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ t.rotation.T
        return PointCloud(t.apply(self.points), normals, self.colors)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_colors is not None:
            c = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("vertex_colors must have one row per vertex")
            object.__setattr__(self, "vertex_colors", c)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals; isolated vertices get +z."""
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        acc = np.zeros_like(v)
        for k in range(3):
            np.add.at(acc, f[:, k], fn)
        norm = np.linalg.norm(acc, axis=1)
        out = np.tile([0.0, 0.0, 1.0], (len(v), 1))
        ok = norm > 0
        out[ok] = acc[ok] / norm[ok, None]
        return out

    def to_cloud(self) -> PointCloud:
        return PointCloud(self.vertices, self.vertex_normals(), self.vertex_colors)

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.apply(self.vertices), self.faces, self.vertex_colors)


def merge_meshes(meshes) -> TriangleMesh:
    meshes = list(meshes)
    verts, faces, colors = [], [], []
    offset = 0
    with_color = all(m.vertex_colors is not None for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        if with_color:
            colors.append(m.vertex_colors)
        offset += len(m.vertices)
    return TriangleMesh(
        np.concatenate(verts) if verts else np.zeros((0, 3)),
        np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64),
        np.concatenate(colors) if with_color and colors else None,
    )


def voxel_downsample(cloud: PointCloud, cell_size: float) -> tuple[PointCloud, np.ndarray]:
    """Average points per occupied voxel.

    Returns the downsampled cloud and, for each input point, the index of the
    output point it was merged into. Output order follows sorted voxel keys.
    """
    keys = voxel_keys(cloud.points, cell_size)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n = inverse.max() + 1 if len(inverse) else 0
    counts = np.bincount(inverse, minlength=n).astype(np.float64)

    def mean(arr):
        out = np.zeros((n, 3))
        for c in range(3):
            out[:, c] = np.bincount(inverse, weights=arr[:, c], minlength=n)
        return out / counts[:, None]

    normals = None
    if cloud.normals is not None:
        normals = mean(cloud.normals)
        norm = np.linalg.norm(normals, axis=1)
        bad = norm < 1e-12
        normals[~bad] /= norm[~bad, None]
        # opposing normals cancelled out; fall back to the first member's normal
        if np.any(bad):
            first = np.full(n, -1)
            first[inverse[::-1]] = np.arange(len(inverse))[::-1]
            normals[bad] = cloud.normals[first[bad]]
    colors = None if cloud.colors is None else mean(cloud.colors)
    return PointCloud(mean(cloud.points), normals, colors), inverse
