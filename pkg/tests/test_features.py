import math

import numpy as np
import pytest

from scenediff.exceptions import MissingNormals
from scenediff.features import (
    DESCRIPTOR_SIZE,
    HIST_TOTAL,
    N_BINS,
    Correspondence,
    Correspondences,
    augment_descriptors,
    compute_fpfh,
    downsample_for_matching,
    filter_persistent,
    filter_static,
    match_features,
    pair_features,
)
from scenediff.geom import PointCloud, RigidTransform, rotation_about_axis


# ---------------------------------------------------------------- reference FPFH

def _sub(a, b):
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def _bin(x, lo, hi):
    return min(max(int(math.floor(N_BINS * (x - lo) / (hi - lo))), 0), N_BINS - 1)


def _pair(p1, n1, p2, n2):
    dp = _sub(p2, p1)
    d = math.sqrt(_dot(dp, dp))
    if d == 0:
        return None
    dp = [c / d for c in dp]
    a1, a2 = _dot(n1, dp), _dot(n2, dp)
    if math.acos(min(abs(a1), 1.0)) > math.acos(min(abs(a2), 1.0)):
        n1, n2, dp, phi = n2, n1, [-c for c in dp], -a2
    else:
        phi = a1
    v = _cross(dp, n1)
    vn = math.sqrt(_dot(v, v))
    if vn == 0:
        return None
    v = [c / vn for c in v]
    w = _cross(n1, v)
    return math.atan2(_dot(w, n2), _dot(n1, n2)), _dot(v, n2), phi


def _normalise(h):
    out = list(h)
    for s in range(3):
        total = sum(out[s * N_BINS:(s + 1) * N_BINS])
        for b in range(s * N_BINS, (s + 1) * N_BINS):
            out[b] = out[b] * HIST_TOTAL / total if total > 0 else 0.0
    return out


def reference_fpfh(points, normals, radius):
    """Plain double loop over all point pairs."""
    n = len(points)
    nbrs = [[j for j in range(n) if j != i
             and math.dist(points[i], points[j]) <= radius] for i in range(n)]
    spfh = []
    for i in range(n):
        h = [0.0] * DESCRIPTOR_SIZE
        for j in nbrs[i]:
            f = _pair(points[i], normals[i], points[j], normals[j])
            if f is None:
                continue
            h[_bin(f[0], -math.pi, math.pi)] += 1
            h[N_BINS + _bin(f[1], -1, 1)] += 1
            h[2 * N_BINS + _bin(f[2], -1, 1)] += 1
        spfh.append(_normalise(h))
    out = []
    for i in range(n):
        if len(nbrs[i]) < 2:
            out.append([0.0] * DESCRIPTOR_SIZE)
            continue
        acc = list(spfh[i])
        for j in nbrs[i]:
            d = math.dist(points[i], points[j])
            if d > 0:
                for b in range(DESCRIPTOR_SIZE):
                    acc[b] += spfh[j][b] / d / len(nbrs[i])
        out.append(_normalise(acc))
    return np.array(out)


def random_cloud(rng, n=50):
    pts = rng.uniform(0, 1, size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


def test_fpfh_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cloud = random_cloud(rng)
        radius = rng.uniform(0.15, 0.5)
        ours = compute_fpfh(cloud, radius)
        ref = reference_fpfh(cloud.points.tolist(), cloud.normals.tolist(), radius)
        assert np.abs(ours - ref).max() < 1e-9


def test_fpfh_plane_is_uniform():
    g = np.arange(0, 1.0001, 0.05)
    xs, ys = np.meshgrid(g, g)
    pts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
    cloud = PointCloud(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
    d = compute_fpfh(cloud, 0.12)
    assert np.abs(d - d[0]).max() < 1e-6
    for s in range(3):
        assert d[0, s * N_BINS:(s + 1) * N_BINS].sum() == pytest.approx(HIST_TOTAL)


def test_isolated_point_is_zero():
    pts = np.array([[0, 0, 0], [0.01, 0, 0], [0, 0.01, 0], [5, 5, 5]], float)
    cloud = PointCloud(pts, np.tile([0, 0, 1.0], (4, 1)))
    d = compute_fpfh(cloud, 0.05)
    assert np.all(d[3] == 0)
    assert d.shape == (4, DESCRIPTOR_SIZE)


def test_fpfh_rigid_invariance():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 200)
    t = RigidTransform(rotation_about_axis([0.3, -1, 0.5], 1.1), [2.0, -1.0, 0.5])
    a = compute_fpfh(cloud, 0.3)
    b = compute_fpfh(cloud.transformed(t), 0.3)
    assert np.abs(a - b).max() < 1e-6


def test_fpfh_lattice_box_is_rotation_invariant():
    # a box face lattice rotated by 90 degrees maps exactly onto itself; every
    # crease pair must still resolve identically
    g = np.arange(0, 0.401, 0.05)
    pts, nrm = [], []
    for ax in range(3):
        for side, val in ((-1.0, 0.0), (1.0, 0.4)):
            a, b = np.meshgrid(g, g)
            p = np.zeros((a.size, 3))
            others = [k for k in range(3) if k != ax]
            p[:, ax] = val
            p[:, others[0]] = a.ravel()
            p[:, others[1]] = b.ravel()
            n = np.zeros((a.size, 3))
            n[:, ax] = side
            pts.append(p)
            nrm.append(n)
    cloud = PointCloud(np.vstack(pts) - 0.2, np.vstack(nrm))
    rz = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2))
    moved = cloud.transformed(rz)
    a = compute_fpfh(cloud, 0.26)
    b = compute_fpfh(moved, 0.26)
    # pair each moved point with the original point at the same location
    order = np.lexsort(np.round(cloud.points, 9).T)
    order_m = np.lexsort(np.round(moved.points, 9).T)
    same = np.all(np.isclose(cloud.points[order], moved.points[order_m]), axis=1)
    same &= np.all(np.isclose(cloud.normals[order], moved.normals[order_m]), axis=1)
    assert same.sum() > 0.5 * len(cloud)
    assert np.abs(a[order][same] - b[order_m][same]).max() < 1e-6


def test_fpfh_requires_normals():
    with pytest.raises(MissingNormals):
        compute_fpfh(PointCloud(np.zeros((3, 3))), 0.1)


def test_pair_features_degenerate():
    p = np.zeros((1, 3))
    n = np.array([[0, 0, 1.0]])
    assert not pair_features(p, n, p, n)[3][0]
    # connecting line parallel to the source normal: no frame
    assert not pair_features(p, n, np.array([[0, 0, 1.0]]), n)[3][0]


# ---------------------------------------------------------------- matching

def test_self_match():
    d = np.random.default_rng(2).random((40, DESCRIPTOR_SIZE))
    c = match_features(d, d)
    assert np.array_equal(c.index_s, np.arange(40))
    assert np.array_equal(c.index_r, np.arange(40))
    assert np.all(c.distance_feature == 0)


def test_separated_clusters_do_not_cross():
    rng = np.random.default_rng(3)
    a = rng.random((30, 33))
    b = rng.random((30, 33)) + 100
    c = match_features(np.vstack([a, b]), np.vstack([a + 0.01, b - 0.01]))
    assert np.all((c.index_s < 30) == (c.index_r < 30))


def test_match_equals_linear_scan():
    rng = np.random.default_rng(4)
    for _ in range(100):
        ds = rng.random((rng.integers(1, 60), 33))
        dr = rng.random((rng.integers(1, 30), 33))
        c = match_features(ds, dr)
        for r, s, dist in zip(c.index_r, c.index_s, c.distance_feature):
            d = np.sqrt(((ds - dr[r]) ** 2).sum(axis=1))
            assert s == np.flatnonzero(d == d.min())[0]
            assert dist == pytest.approx(d.min(), abs=1e-12)


def test_match_requires_data():
    with pytest.raises(ValueError):
        match_features(np.zeros((0, 33)), np.zeros((2, 33)))


def corr_pair(gap):
    s = np.array([[0.0, 0, 0]])
    r = np.array([[gap, 0, 0]])
    return Correspondences([0], [0], [0.0]), s, r


def test_filter_static():
    c, s, r = corr_pair(0.01)
    assert len(filter_static(c, s, r, 0.1)) == 0
    c, s, r = corr_pair(0.5)
    assert len(filter_static(c, s, r, 0.1)) == 1
    assert len(filter_static(Correspondences.empty(), s, r, 0.1)) == 0


def test_filter_static_idempotent_subset():
    rng = np.random.default_rng(5)
    s, r = rng.random((50, 3)), rng.random((50, 3))
    c = Correspondences(rng.integers(0, 50, 80), rng.integers(0, 50, 80), rng.random(80))
    once = filter_static(c, s, r, 0.3)
    assert filter_static(once, s, r, 0.3) == once
    keys = set(zip(c.index_s.tolist(), c.index_r.tolist()))
    assert set(zip(once.index_s.tolist(), once.index_r.tolist())) <= keys


def test_filter_persistent():
    s = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    r = np.array([[0.0, 0, 0.01], [3.0, 0, 0]])
    c = Correspondences([0, 1], [1, 1], [0.0, 0.0])
    kept = filter_persistent(c, s, r, 0.03)
    # reference point 0 still has rescan geometry at 1 cm
    assert kept.index_s.tolist() == [1]


def test_correspondences_container():
    c = Correspondences([1, 2, 3], [4, 5, 6], [0.1, 0.2, 0.3])
    assert c[1] == Correspondence(2, 5, 0.2)
    assert len(c[np.array([True, False, True])]) == 2
    assert [x.index_r for x in c] == [4, 5, 6]
    with pytest.raises(ValueError):
        Correspondences([1], [1, 2])


def test_downsample_for_matching_one_per_cell():
    pts = np.array([[0.01, 0, 0], [0.02, 0, 0], [0.3, 0, 0]])
    idx = downsample_for_matching(PointCloud(pts), 0.1)
    assert idx.tolist() == [0, 2] or idx.tolist() == [1, 2]
    assert len(downsample_for_matching(PointCloud(np.zeros((0, 3))), 0.1)) == 0


def test_augment_descriptors():
    d = np.ones((2, 33))
    out = augment_descriptors(d, np.zeros((2, 3)), np.full((2, 3), 0.5), 1.0, 10.0)
    assert out.shape == (2, 39)
    assert np.all(out[:, 33:36] == 5.0)
    assert augment_descriptors(d) is not None and augment_descriptors(d).shape == (2, 33)
