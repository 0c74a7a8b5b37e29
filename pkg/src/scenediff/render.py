"""Pinhole camera model, depth rasterisation and back-projection.

Camera coordinates are ``X_c = R @ X_w + Tr`` with the optical axis along
+z, image x to the right and image y down. Pixel ``(x, y)`` is sampled at
its centre ``(x + 0.5, y + 0.5)``. Depth is camera-space z; 0 marks pixels
where no surface was rendered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatch, InvalidDepth
from .geom import TriangleMesh, is_rotation

NEAR_PLANE = 1e-3
_MAX_PAIRS = 1 << 22


@dataclass(frozen=True, eq=False)
class CameraPose:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not is_rotation(r):
            raise ValueError("camera rotation is not orthonormal with det 1")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def projection_matrix(self) -> np.ndarray:
        """P = K [R | Tr]."""
        return self.intrinsics @ np.column_stack([self.rotation, self.translation])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, width, height, up=(0.0, 0.0, 1.0)):
        """Pose at `eye` whose optical axis points at `target`."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.vstack([right, down, fwd])
        return cls(fx, fy, cx, cy, rot, -rot @ eye, width, height)

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray  # (height, width), metres, 0 = unobserved

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth values must be a 2-D array")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @classmethod
    def empty(cls, width, height):
        return cls(np.zeros((height, width)))


def project(points, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous image coordinates (u, v) and camera depth z of world points."""
    pc = pose.to_camera(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.fx * pc[:, 0] / z + pose.cx
        v = pose.fy * pc[:, 1] / z + pose.cy
    return u, v, z


def backproject_pixels(xs, ys, depths, pose: CameraPose) -> np.ndarray:
    """Vectorised back-projection of integer pixels at the given depths."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(~(d > 0)):
        raise InvalidDepth("back-projection requires depth > 0")
    ray = np.column_stack([
        (xs + 0.5 - pose.cx) / pose.fx,
        (ys + 0.5 - pose.cy) / pose.fy,
        np.ones_like(xs),
    ])
    cam = ray * d[:, None]
    return (cam - pose.translation) @ pose.rotation


def backproject(pixel, depth: float, pose: CameraPose) -> np.ndarray:
    """World point ``R^T (K^-1 [x, y, 1]^T * depth - Tr)`` for one pixel."""
    if not depth > 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    x, y = pixel
    return backproject_pixels([x], [y], [depth], pose)[0]


def _clip_near(tri_cam: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip one camera-space triangle against z >= near; fan-triangulate."""
    poly = []
    for i in range(3):
        a, b = tri_cam[i], tri_cam[(i + 1) % 3]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            poly.append(a)
        if a_in != b_in:
            s = (near - a[2]) / (b[2] - a[2])
            p = a + s * (b - a)
            p[2] = near
            poly.append(p)
    return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def _rasterize(tris: np.ndarray, pose: CameraPose, zbuf: np.ndarray) -> None:
    """Z-buffer camera-space triangles (all vertices in front of the near plane)."""
    if len(tris) == 0:
        return
    w, h = pose.width, pose.height
    z = tris[:, :, 2]
    u = pose.fx * tris[:, :, 0] / z + pose.cx
    v = pose.fy * tris[:, :, 1] / z + pose.cy

    x0 = np.maximum(np.ceil(u.min(axis=1) - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u.max(axis=1) - 0.5), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v.min(axis=1) - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v.max(axis=1) - 0.5), h - 1).astype(np.int64)
    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    keep = (x1 >= x0) & (y1 >= y0) & (np.abs(area) > 1e-12)
    if not np.any(keep):
        return
    u, v, z, area = u[keep], v[keep], z[keep], area[keep]
    x0, x1, y0, y1 = x0[keep], x1[keep], y0[keep], y1[keep]
    bw = x1 - x0 + 1
    counts = bw * (y1 - y0 + 1)
    inv_z = 1.0 / z

    flat = zbuf.reshape(-1)
    start = 0
    cum = np.cumsum(counts)
    while start < len(counts):
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + _MAX_PAIRS, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        c = counts[sl]
        tri = np.repeat(np.arange(start, stop), c)
        offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        px = x0[tri] + offs % bw[tri]
        py = y0[tri] + offs // bw[tri]
        sx = px + 0.5
        sy = py + 0.5
        uu, vv = u[tri], v[tri]
        # barycentric weights from signed sub-areas
        l0 = ((uu[:, 1] - sx) * (vv[:, 2] - sy) - (uu[:, 2] - sx) * (vv[:, 1] - sy)) / area[tri]
        l1 = ((uu[:, 2] - sx) * (vv[:, 0] - sy) - (uu[:, 0] - sx) * (vv[:, 2] - sy)) / area[tri]
        l2 = 1.0 - l0 - l1
        eps = -1e-9
        inside = (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
        if np.any(inside):
            iz = inv_z[tri[inside]]
            # base plus differences: exact when the three depths are equal
            depth = 1.0 / (iz[:, 0] + l1[inside] * (iz[:, 1] - iz[:, 0])
                           + l2[inside] * (iz[:, 2] - iz[:, 0]))
            np.minimum.at(flat, py[inside] * w + px[inside], depth)
        start = stop


def render_depth(mesh: TriangleMesh, pose: CameraPose, near: float = NEAR_PLANE) -> DepthMap:
    """Rasterise the nearest-surface z-depth of `mesh` seen from `pose`."""
    zbuf = np.full((pose.height, pose.width), np.inf)
    if len(mesh.faces):
        cam = pose.to_camera(mesh.vertices)[mesh.faces]  # (F, 3, 3)
        z = cam[:, :, 2]
        front = np.all(z >= near, axis=1)
        crossing = ~front & np.any(z >= near, axis=1)
        _rasterize(cam[front], pose, zbuf)
        if np.any(crossing):
            clipped = [t for tri in cam[crossing] for t in _clip_near(tri, near)]
            if clipped:
                _rasterize(np.array(clipped), pose, zbuf)
    zbuf[~np.isfinite(zbuf)] = 0.0
    return DepthMap(zbuf)


def combine_depths(d_s: DepthMap, d_r: DepthMap) -> DepthMap:
    """Per-pixel nearer depth; 0 wherever either map is unobserved."""
    if d_s.values.shape != d_r.values.shape:
        raise DimensionMismatch(f"{d_s.values.shape} vs {d_r.values.shape}")
    a, b = d_s.values, d_r.values
    out = np.where((a > 0) & (b > 0), np.minimum(a, b), 0.0)
    return DepthMap(out)


def write_depth_pgm(path, depth: DepthMap) -> None:
    """Dump a depth map as a 16-bit binary PGM in millimetres (0 = invalid)."""
    mm = np.clip(np.round(depth.values * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())
