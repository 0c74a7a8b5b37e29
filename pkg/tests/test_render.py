import numpy as np
import pytest

from scenediff.exceptions import DimensionMismatch, InvalidDepth
from scenediff.geom import TriangleMesh, rotation_about_axis
from scenediff.render import (
    CameraPose,
    DepthMap,
    backproject,
    backproject_pixels,
    combine_depths,
    project,
    render_depth,
    write_depth_pgm,
)


def quad(z, half=1.0, cx=0.0, cy=0.0):
    v = [[cx - half, cy - half, z], [cx + half, cy - half, z],
         [cx + half, cy + half, z], [cx - half, cy + half, z]]
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def frontal_pose(w=64, h=48, f=40.0):
    return CameraPose(f, f, w / 2, h / 2, np.eye(3), np.zeros(3), w, h)


def test_fronto_parallel_quad():
    pose = frontal_pose()
    depth = render_depth(quad(2.0), pose).values
    # the quad spans +-1 m at 2 m: +-20 px around the centre
    inner = depth[6:42, 14:50]
    assert np.all(inner == 2.0)
    assert depth[0, 0] == 0.0


def test_nearest_surface_wins():
    pose = frontal_pose()
    mesh = TriangleMesh(np.vstack([quad(1.0, 0.3).vertices, quad(2.0).vertices]),
                        [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    depth = render_depth(mesh, pose).values
    assert depth[24, 32] == pytest.approx(1.0)
    assert depth[24, 55] == 0.0 or depth[24, 55] == pytest.approx(2.0)
    assert depth[24, 12] == pytest.approx(2.0)


def ray_plane_depth(pose, normal, offset):
    """Per-pixel z-depth of the plane ``normal . x = offset`` by direct ray casting."""
    ys, xs = np.mgrid[0:pose.height, 0:pose.width]
    d_cam = np.stack([(xs + 0.5 - pose.cx) / pose.fx, (ys + 0.5 - pose.cy) / pose.fy,
                      np.ones_like(xs, dtype=float)], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T applied to row vectors
    o = pose.center
    return (offset - normal @ o) / (d_world @ normal)


def test_tilted_plane_matches_ray_cast():
    pose = CameraPose.look_at([0.3, -0.2, -3.0], [0, 0, 0], 50.0, 50.0, 40, 30, 80, 60,
                              up=(0, 1, 0))
    rot = rotation_about_axis([1, 0.5, 0], np.radians(35))
    big = quad(0.0, half=3.0)
    mesh = TriangleMesh(big.vertices @ rot.T, big.faces)
    normal = rot @ [0, 0, 1.0]
    depth = render_depth(mesh, pose).values
    oracle = ray_plane_depth(pose, normal, 0.0)
    hit = depth > 0
    assert hit.sum() > 0.5 * depth.size
    assert np.abs(depth[hit] - oracle[hit]).max() < 1e-4


def test_triangles_behind_camera_are_clipped():
    pose = frontal_pose()
    # a floor strip running from behind the camera to the front
    mesh = TriangleMesh([[-1, 0.5, -2], [1, 0.5, -2], [1, 0.5, 4], [-1, 0.5, 4]],
                        [[0, 1, 2], [0, 2, 3]])
    depth = render_depth(mesh, pose).values
    assert np.all(depth >= 0)
    assert np.any(depth > 0)
    assert np.all(depth[depth > 0] >= 1e-3 - 1e-12)


def test_backproject_axis():
    pose = CameraPose(100.0, 100.0, 50.5, 40.5, np.eye(3), np.zeros(3), 101, 81)
    p = backproject((50, 40), 2.0, pose)
    assert np.allclose(p, [0, 0, 2.0])


def test_backproject_rejects_zero_depth():
    with pytest.raises(InvalidDepth):
        backproject((1, 1), 0.0, frontal_pose())
    with pytest.raises(InvalidDepth):
        backproject_pixels([1, 2], [1, 2], [1.0, 0.0], frontal_pose())


def test_projection_round_trip():
    rng = np.random.default_rng(0)
    pose = CameraPose.look_at([2.0, 1.0, 1.5], [0, 0, 0.3], 277.0, 277.0, 160, 120, 320, 240)
    pts = rng.uniform(-1, 1, size=(1000, 3))
    u, v, z = project(pts, pose)
    assert np.all(z > 0)
    back = backproject_pixels(u - 0.5, v - 0.5, z, pose)
    assert np.abs(back - pts).max() < 1e-6


def test_combine_depths():
    a = DepthMap(np.array([[1.5, 0.0, 2.0]]))
    b = DepthMap(np.array([[2.0, 2.0, 2.0]]))
    assert combine_depths(a, b).values.tolist() == [[1.5, 0.0, 2.0]]
    with pytest.raises(DimensionMismatch):
        combine_depths(a, DepthMap(np.zeros((2, 3))))


def test_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(10, 10, 5, 5, np.eye(3) * 2, np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        CameraPose(10, 10, 50, 5, np.eye(3), np.zeros(3), 10, 10)


def test_pgm_dump(tmp_path):
    path = tmp_path / "d.pgm"
    write_depth_pgm(path, DepthMap(np.array([[0.0, 1.234]])))
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 1\n65535\n")
    assert np.frombuffer(data[-4:], ">u2").tolist() == [0, 1234]
