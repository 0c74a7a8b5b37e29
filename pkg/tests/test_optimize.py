from itertools import product

import numpy as np
import pytest

from scenediff.exceptions import GraphMismatch, MissingColors, UnsetPriors
from scenediff.geom import RigidTransform, SpatialIndex
from scenediff.optimize import (
    EnergyParams,
    GraphCutLabeler,
    Labeling,
    SupportRegion,
    consistency_mask,
    consistent_under,
    energy,
    fuse_labelings,
    min_cut_labeling,
    prior_labeling,
    solve_labeling,
    taneja_binary,
)
from scenediff.supervoxel import Supervoxel, SupervoxelGraph

CHANGE, NEUTRAL = (0.8, 0.2), (0.5, 0.5)


def node(i, pts, scan=0, color=None):
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return Supervoxel(i, np.arange(len(pts)), pts, pts.mean(axis=0), np.array([0, 0, 1.0]),
                      None if color is None else np.asarray(color, float), scan)


def make_graph(priors, edges, points=None):
    n = len(priors)
    pts = points or [np.full((1, 3), float(i)) for i in range(n)]
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return SupervoxelGraph([node(i, pts[i]) for i in range(n)], e, np.asarray(priors, float))


def all_energies(graph, lam, weights):
    """Energy of every one of the 2^V labelings, rows in product order."""
    n = len(graph)
    labs = np.array(list(product((False, True), repeat=n)))
    p = graph.prior
    u1, u0 = -np.log(p[:, 0]), -np.log(p[:, 1])
    total = np.where(labs, u1, u0).sum(axis=1)
    e = graph.edges
    if len(e):
        total = total + lam * ((labs[:, e[:, 0]] != labs[:, e[:, 1]]) * weights).sum(axis=1)
    return labs, total


def test_lambda_zero_is_prior_argmax():
    g = make_graph([CHANGE, NEUTRAL, (0.3, 0.7)], [[0, 1], [1, 2]])
    lab = solve_labeling(g, None, None, EnergyParams(0.0), weights=np.ones(2))
    assert lab.labels.tolist() == [True, False, False]
    assert prior_labeling(g) == lab


def test_chain_propagates():
    g = make_graph([CHANGE] + [NEUTRAL] * 4, [[i, i + 1] for i in range(4)])
    w = np.ones(4)
    lab = solve_labeling(g, None, None, EnergyParams(0.3), weights=w)
    assert lab.labels.all()
    labs, en = all_energies(g, 0.3, w)
    assert energy(g, lab, 0.3, w) == pytest.approx(en.min(), abs=1e-12)


def test_inconsistent_node_blocks_leak():
    # 0 and 2 are consistent, 1 is not: both edges carry weight 0
    g = make_graph([CHANGE, NEUTRAL, NEUTRAL], [[0, 1], [1, 2]])
    w = np.zeros(2)
    lab = solve_labeling(g, None, None, EnergyParams(5.0), weights=w)
    assert lab.labels.tolist() == [True, False, False]
    labs, en = all_energies(g, 5.0, w)
    assert energy(g, lab, 5.0, w) == pytest.approx(en.min())


def test_isolated_neutral_node_is_zero():
    g = make_graph([NEUTRAL], [])
    assert not solve_labeling(g, None, None, EnergyParams(1.0), weights=np.zeros(0)).labels[0]


def test_mincut_matches_exhaustive_small():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(1, 9))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
        p1 = rng.uniform(0.05, 0.95, n)
        g = make_graph(np.column_stack([p1, 1 - p1]), pairs)
        w = rng.uniform(0, 2, len(pairs))
        lam = float(rng.choice([0.1, 0.5, 2.0]))
        lab = solve_labeling(g, None, None, EnergyParams(lam), weights=w)
        _, en = all_energies(g, lam, w)
        assert energy(g, lab, lam, w) <= en.min() + 1e-9


def test_consistent_components_uniform_at_large_lambda():
    g = make_graph([CHANGE, NEUTRAL, NEUTRAL, CHANGE, NEUTRAL], [[0, 1], [1, 2], [3, 4]])
    lab = solve_labeling(g, None, None, EnergyParams(100.0), weights=np.ones(3))
    assert len(set(lab.labels[[0, 1, 2]])) == 1
    assert len(set(lab.labels[[3, 4]])) == 1


def test_unset_priors():
    g = SupervoxelGraph([node(0, [[0, 0, 0]])], np.zeros((0, 2), np.int64))
    with pytest.raises(UnsetPriors):
        solve_labeling(g, None, None, EnergyParams(), weights=np.zeros(0))


def test_weights_checked():
    g = make_graph([CHANGE, NEUTRAL], [[0, 1]])
    with pytest.raises(GraphMismatch):
        solve_labeling(g, None, None, EnergyParams(), weights=np.ones(3))
    with pytest.raises(ValueError):
        solve_labeling(g, None, None, EnergyParams(), weights=-np.ones(1))
    with pytest.raises(ValueError):
        EnergyParams(lam=-1.0)


def test_min_cut_direct():
    u = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert min_cut_labeling(u, np.array([[0, 1], [1, 2]]), np.array([2.0, 0.0])).tolist() == [True, True, False]


# ------------------------------------------------------------------ consistency

def square(z=0.0, shift=(0.0, 0.0)):
    g = np.arange(0, 0.3, 0.05)
    xs, ys = np.meshgrid(g, g)
    return np.column_stack([xs.ravel() + shift[0], ys.ravel() + shift[1], np.full(xs.size, z)])


def test_consistent_under_moved_object():
    before = square()
    t = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    index = SpatialIndex(t.apply(before))
    assert consistent_under(node(0, before), t, index, 0.05)


def test_static_surface_translated_into_free_space():
    wall = square()
    index = SpatialIndex(wall)
    t = RigidTransform(np.eye(3), [0.0, 0.0, 0.5])
    assert not consistent_under(node(0, wall), t, index, 0.05)
    # identity trivially agrees, which is why near-identity motions are dropped upstream
    assert consistent_under(node(0, wall), RigidTransform.identity(), index, 0.05)


def test_support_region_blocks_outside_nodes():
    wall = square()
    index = SpatialIndex(wall)
    support = SupportRegion(square(shift=(5.0, 5.0)), 0.1)
    assert not consistent_under(node(0, wall), RigidTransform.identity(), index, 0.05, support)
    assert SupportRegion(wall, 0.1).contains(wall).all()


def test_support_region_hull():
    tet = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    reg = SupportRegion(tet, 0.01)
    assert reg.contains([[0.1, 0.1, 0.1]]).all()
    assert not reg.contains([[0.9, 0.9, 0.9]]).any()  # inside the box, outside the hull
    assert not SupportRegion(np.zeros((0, 3)), 0.1).contains([[0, 0, 0]]).any()


def test_consistency_mask_both_scans():
    ref, res = square(), square(shift=(1.0, 0.0))
    t = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    g = SupervoxelGraph([node(0, ref, scan=0), node(1, res, scan=1), node(2, square(z=3.0), scan=0)],
                        np.zeros((0, 2), np.int64))
    mask = consistency_mask(g, t, {0: SpatialIndex(ref), 1: SpatialIndex(res)}, 0.05)
    assert mask.tolist() == [True, True, False]


# ------------------------------------------------------------------ fusion, baseline

def test_fuse():
    a = Labeling([True, False, False])
    b = Labeling([False, False, True])
    empty = Labeling.zeros(3)
    assert fuse_labelings([a], empty) == a
    assert fuse_labelings([a, b], empty).labels.tolist() == [True, False, True]
    assert fuse_labelings([a, b], empty) == fuse_labelings([b, a], empty)
    assert fuse_labelings([a, a], a) == a
    # a removed object seen only by the prior survives fusion
    base = Labeling([False, True, False])
    assert fuse_labelings([a], base).labels[1]
    with pytest.raises(GraphMismatch):
        fuse_labelings([Labeling.zeros(2)], empty)


def test_taneja_weights():
    g = SupervoxelGraph([node(i, [[i, 0, 0]]) for i in range(3)], np.array([[0, 1], [1, 2]]))
    w = taneja_binary(g, [[0, 0, 0], [0, 0, 0], [1, 1, 1]], 2.0)
    assert w.tolist() == pytest.approx([2.0, 0.5])
    assert np.all(taneja_binary(g, np.zeros((3, 3)), 0.0) == 0)
    with pytest.raises(MissingColors):
        taneja_binary(g, None, 1.0)
    with pytest.raises(MissingColors):
        taneja_binary(g, np.full((3, 3), np.nan), 1.0)


def test_labeler_estimator():
    ref, res = square(), square(shift=(1.0, 0.0))
    g = SupervoxelGraph([node(0, ref, scan=0), node(1, res, scan=1)], np.array([[0, 1]]),
                        np.array([CHANGE, NEUTRAL]))
    t = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    est = GraphCutLabeler(lam=1.0).fit(g, [t], {0: SpatialIndex(ref), 1: SpatialIndex(res)})
    assert est.predict().tolist() == [True, True]
    assert est.base_.labels.tolist() == [True, False]
