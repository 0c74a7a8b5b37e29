"""Binary graph-cut labeling with transformation-consistency coupling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from sklearn.base import BaseEstimator

from .exceptions import GraphMismatch, MissingColors, UnsetPriors
from .geom import RigidTransform, SpatialIndex
from .supervoxel import Supervoxel, SupervoxelGraph

MAX_TEST_POINTS = 50
_FLOW_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Labeling:
    labels: np.ndarray  # bool per node, True = changing

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=bool).reshape(-1)
        object.__setattr__(self, "labels", arr)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, Labeling) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash(self.labels.tobytes())

    @classmethod
    def zeros(cls, n: int) -> "Labeling":
        return cls(np.zeros(n, dtype=bool))

    @property
    def changed(self) -> np.ndarray:
        return np.flatnonzero(self.labels)


@dataclass(frozen=True)
class EnergyParams:
    lam: float = 0.5
    epsilon_t: float = 0.05

    def __post_init__(self):
        for name in ("lam", "epsilon_t"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")


class SupportRegion:
    """Convex hull of a motion's inlier points, grown by a margin.

    Restricts which supervoxels a motion may claim. Without it a large
    static surface translated along itself (a floor under a sliding box)
    also lands on observed geometry and would be coupled to the object.
    """

    def __init__(self, points, margin: float):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.margin = float(margin)
        self.lo = pts.min(axis=0) - margin if len(pts) else np.full(3, np.inf)
        self.hi = pts.max(axis=0) + margin if len(pts) else np.full(3, -np.inf)
        self._eq = None
        if len(pts) >= 4:
            try:
                self._eq = ConvexHull(pts).equations
            except QhullError:
                # flat or degenerate inlier set: box test only
                self._eq = None

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = np.all((p >= self.lo) & (p <= self.hi), axis=1)
        if self._eq is not None:
            signed = p @ self._eq[:, :3].T + self._eq[:, 3]
            inside &= np.all(signed <= self.margin, axis=1)
        return inside


def _test_points(sv: Supervoxel) -> np.ndarray:
    pts = sv.points
    if len(pts) <= MAX_TEST_POINTS:
        return pts
    # deterministic uniform subsample
    pick = np.linspace(0, len(pts) - 1, MAX_TEST_POINTS).round().astype(np.int64)
    return pts[pick]


def consistent_under(sv: Supervoxel, t: RigidTransform, target_index: SpatialIndex,
                     epsilon_t: float, support: SupportRegion | None = None,
                     min_support: float = 0.5) -> bool:
    """Does `sv`, moved by `t`, land on geometry of the other scan?

    Up to 50 evenly spaced members are transformed; the supervoxel is
    consistent when their median nearest-neighbour distance is at most
    `epsilon_t`. With a `support` region, at least `min_support` of the
    tested members must also lie inside it.
    """
    pts = _test_points(sv)
    if len(pts) == 0:
        raise ValueError("supervoxel has no members")
    if support is not None and np.mean(support.contains(pts)) < min_support:
        return False
    d = target_index.distances(t.apply(pts))
    return bool(np.median(d) <= epsilon_t)


def consistency_mask(graph: SupervoxelGraph, t: RigidTransform, indexes: dict,
                     epsilon_t: float, supports: dict | None = None,
                     min_support: float = 0.5) -> np.ndarray:
    """Per-node consistency for a graph holding supervoxels of both scans.

    Nodes tagged scan 0 (reference) are moved by `t` and tested against
    ``indexes[1]``; scan 1 nodes are moved by the inverse against
    ``indexes[0]``. `supports` maps scan tag to a SupportRegion.
    """
    inv = t.inverse()
    out = np.zeros(len(graph.nodes), dtype=bool)
    for k, sv in enumerate(graph.nodes):
        scan = getattr(sv, "scan", 0)
        other = 1 - scan
        if other not in indexes:
            continue
        out[k] = consistent_under(sv, t if scan == 0 else inv, indexes[other], epsilon_t,
                                  None if supports is None else supports.get(scan), min_support)
    return out


def consistency_weights(graph: SupervoxelGraph, consistent: np.ndarray) -> np.ndarray:
    """Edge weight 1 where both endpoints are consistent, else 0."""
    e = graph.edges
    if len(e) == 0:
        return np.zeros(0)
    return (consistent[e[:, 0]] & consistent[e[:, 1]]).astype(np.float64)


def _unaries(graph: SupervoxelGraph) -> np.ndarray:
    """(n, 2) costs: column 0 for label 0, column 1 for label 1."""
    if graph.prior is None:
        raise UnsetPriors("assign priors before optimizing")
    p = np.asarray(graph.prior, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.column_stack([-np.log(p[:, 1]), -np.log(p[:, 0])])


def energy(graph: SupervoxelGraph, labels, lam: float, weights) -> float:
    """Unary negative log-priors plus lam-weighted Potts penalty."""
    lab = np.asarray(labels.labels if isinstance(labels, Labeling) else labels, dtype=bool)
    u = _unaries(graph)
    total = float(np.sum(np.where(lab, u[:, 1], u[:, 0])))
    e = graph.edges
    if len(e):
        cut = lab[e[:, 0]] != lab[e[:, 1]]
        total += float(lam * np.sum(np.asarray(weights, dtype=np.float64)[cut]))
    return total


class _FlowGraph:
    """Dinic max-flow on a small directed graph with float capacities."""

    def __init__(self, n: int):
        self.n = n
        self.head = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[float] = []

    def add_edge(self, u: int, v: int, c_uv: float, c_vu: float = 0.0):
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(c_uv)
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(c_vu)

    def _levels(self, s: int, t: int):
        level = [-1] * self.n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.head[u]:
                v = self.to[e]
                if level[v] < 0 and self.cap[e] > _FLOW_EPS:
                    level[v] = level[u] + 1
                    q.append(v)
        return level if level[t] >= 0 else None

    def max_flow(self, s: int, t: int) -> float:
        total = 0.0
        while True:
            level = self._levels(s, t)
            if level is None:
                return total
            it = [0] * self.n
            while True:
                pushed = self._augment(s, t, level, it)
                if pushed <= _FLOW_EPS:
                    break
                total += pushed

    def _augment(self, s, t, level, it) -> float:
        # iterative DFS along the level graph
        path: list[int] = []
        u = s
        while True:
            if u == t:
                f = min(self.cap[e] for e in path)
                for e in path:
                    self.cap[e] -= f
                    self.cap[e ^ 1] += f
                return f
            advanced = False
            edges = self.head[u]
            while it[u] < len(edges):
                e = edges[it[u]]
                v = self.to[e]
                if self.cap[e] > _FLOW_EPS and level[v] == level[u] + 1:
                    path.append(e)
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if not advanced:
                if u == s:
                    return 0.0
                level[u] = -1
                e = path.pop()
                u = self.to[e ^ 1]
                it[u] += 1

    def source_side(self, s: int) -> np.ndarray:
        seen = np.zeros(self.n, dtype=bool)
        seen[s] = True
        q = deque([s])
        while q:
            u = q.popleft()
            for e in self.head[u]:
                v = self.to[e]
                if not seen[v] and self.cap[e] > _FLOW_EPS:
                    seen[v] = True
                    q.append(v)
        return seen


def min_cut_labeling(unaries: np.ndarray, edges: np.ndarray, pair_weights: np.ndarray) -> np.ndarray:
    """Exact minimiser of a binary submodular Potts energy.

    Nodes on the source side of the minimal cut take label 1, so a node
    indifferent between labels ends up at 0.
    """
    n = len(unaries)
    s, t = n, n + 1
    g = _FlowGraph(n + 2)
    diff = unaries[:, 0] - unaries[:, 1]
    for i in range(n):
        if diff[i] > 0:
            g.add_edge(s, i, float(diff[i]))      # cut when i takes label 0
        elif diff[i] < 0:
            g.add_edge(i, t, float(-diff[i]))     # cut when i takes label 1
    for (i, j), w in zip(np.asarray(edges).reshape(-1, 2), pair_weights):
        if w > 0:
            g.add_edge(int(i), int(j), float(w), float(w))
    g.max_flow(s, t)
    return g.source_side(s)[:n]


def solve_labeling(graph: SupervoxelGraph, t: RigidTransform | None, rescan_index,
                   params: EnergyParams, weights=None, supports: dict | None = None) -> Labeling:
    """Global minimiser of the per-transform binary energy.

    Edge weights default to transformation consistency under `t`;
    `rescan_index` is either one SpatialIndex over the rescan (reference
    nodes only) or a dict mapping scan tag to index. Passing `weights`
    directly (the color baseline) skips the consistency test.
    """
    u = _unaries(graph)
    if weights is None:
        indexes = rescan_index if isinstance(rescan_index, dict) else {1: rescan_index}
        consistent = consistency_mask(graph, t, indexes, params.epsilon_t, supports)
        weights = consistency_weights(graph, consistent)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(graph.edges):
        raise GraphMismatch("one weight per edge is required")
    if np.any(weights < 0):
        raise ValueError("edge weights must be nonnegative")
    return Labeling(min_cut_labeling(u, graph.edges, params.lam * weights))


def prior_labeling(graph: SupervoxelGraph) -> Labeling:
    """Independent per-node argmax of the prior, ties to 0."""
    u = _unaries(graph)
    return Labeling(u[:, 1] < u[:, 0])


def fuse_labelings(per_transform, base: Labeling) -> Labeling:
    """Pointwise OR of every per-transform labeling and the base labeling."""
    out = np.array(base.labels, dtype=bool)
    for lab in per_transform:
        if len(lab) != len(out):
            raise GraphMismatch(f"labeling sizes differ: {len(lab)} vs {len(out)}")
        out |= lab.labels
    return Labeling(out)


def taneja_binary(graph: SupervoxelGraph, colors, gamma: float) -> np.ndarray:
    """Color-similarity edge weights ``gamma / (||c_i - c_j||^2 + 1)``."""
    if colors is None:
        raise MissingColors("per-node colors are required")
    c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(c) != len(graph.nodes):
        raise GraphMismatch("one color per node is required")
    if np.any(np.isnan(c)):
        raise MissingColors("per-node colors contain NaN")
    e = graph.edges
    if len(e) == 0:
        return np.zeros(0)
    d2 = np.sum((c[e[:, 0]] - c[e[:, 1]]) ** 2, axis=1)
    return gamma / (d2 + 1.0)


class GraphCutLabeler(BaseEstimator):
    """Estimator-style wrapper: per-transform cuts fused with the prior argmax.

    ``fit(graph, transforms, indexes, supports)`` sets ``labeling_`` and
    ``per_transform_``.
    """

    def __init__(self, lam=0.5, epsilon_t=0.05):
        self.lam = lam
        self.epsilon_t = epsilon_t

    def fit(self, graph, transforms, indexes, supports=None):
        params = EnergyParams(self.lam, self.epsilon_t)
        supports = supports or [None] * len(transforms)
        self.per_transform_ = [
            solve_labeling(graph, t, indexes, params, supports=sup)
            for t, sup in zip(transforms, supports)
        ]
        self.base_ = prior_labeling(graph)
        self.labeling_ = fuse_labelings(self.per_transform_, self.base_)
        return self

    def predict(self):
        return self.labeling_.labels
