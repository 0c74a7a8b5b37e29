"""Supervoxel over-segmentation, adjacency graph and soft change priors."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_cloud
from .exceptions import MissingNormals
from .geom import PointCloud, SpatialIndex, voxel_keys

# Fixed soft labels: (rho(l=1), rho(l=0)) with and without detected changes.
PRIOR_CHANGED = (0.8, 0.2)
PRIOR_UNKNOWN = (0.5, 0.5)

_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                     if (dx, dy, dz) != (0, 0, 0)], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Supervoxel:
    id: int
    member_indices: np.ndarray
    points: np.ndarray
    centroid: np.ndarray
    mean_normal: np.ndarray
    mean_color: np.ndarray | None = None
    scan: int = 0

    def __len__(self):
        return len(self.member_indices)


@dataclass(frozen=True, eq=False)
class SupervoxelGraph:
    nodes: list
    edges: np.ndarray  # (m, 2) int, i < j, sorted rows
    prior: np.ndarray | None = None  # (n, 2): columns rho(l=1), rho(l=0)
    change_fraction: np.ndarray | None = None

    def __len__(self):
        return len(self.nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def neighbors(self, i) -> np.ndarray:
        e = self.edges
        return np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]])

    def with_priors(self, prior, change_fraction=None) -> "SupervoxelGraph":
        return replace(self, prior=np.asarray(prior, dtype=np.float64),
                       change_fraction=change_fraction)

    def point_labels(self, n_points: int, scan: int = 0) -> np.ndarray:
        """Supervoxel id of every point of the segmented cloud of `scan`."""
        out = np.full(n_points, -1, dtype=np.int64)
        for sv in self.nodes:
            if sv.scan == scan:
                out[sv.member_indices] = sv.id
        return out


def merge_graphs(graphs) -> SupervoxelGraph:
    """Disjoint union; node ids are renumbered, `scan` is the graph position."""
    nodes, edges, priors, fracs = [], [], [], []
    offset = 0
    for scan, g in enumerate(graphs):
        for sv in g.nodes:
            nodes.append(replace(sv, id=sv.id + offset, scan=scan))
        edges.append(g.edges + offset)
        priors.append(g.prior)
        fracs.append(g.change_fraction)
        offset += len(g.nodes)
    prior = None if any(p is None for p in priors) else np.concatenate(priors)
    frac = None if any(f is None for f in fracs) else np.concatenate(fracs)
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    return SupervoxelGraph(nodes, e.reshape(-1, 2), prior, frac)


def _encode(keys, lo, dims):
    k = keys - lo
    return (k[:, 0] * dims[1] + k[:, 1]) * dims[2] + k[:, 2]


# 13 sign-agnostic directions used to split voxels by surface orientation
_DIRECTIONS = _OFFSETS[:13] / np.linalg.norm(_OFFSETS[:13], axis=1)[:, None]
_MISFIT = 1.0 - np.cos(np.radians(45.0))


class _Elements:
    """Occupied voxels, each split by dominant normal direction.

    A voxel straddling a crease becomes one element per surface so that no
    element carries an averaged, meaningless normal.
    """

    def __init__(self, cloud: PointCloud, voxel_size: float):
        # half-cell shift: samples on a voxel_size lattice land mid-cell rather
        # than on a boundary where rounding would leave empty rows
        keys = voxel_keys(cloud.points + 0.5 * voxel_size, voxel_size)
        dots = cloud.normals @ _DIRECTIONS.T
        bins = np.argmax(np.abs(dots), axis=1)
        sign = np.sign(dots[np.arange(len(bins)), bins])
        sign[sign == 0] = 1.0
        aligned = cloud.normals * sign[:, None]
        rows = np.column_stack([keys, bins])
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
        self.point_element = inverse.reshape(-1)
        self.keys = uniq[:, :3]
        n = len(uniq)
        counts = np.bincount(self.point_element, minlength=n).astype(np.float64)

        def mean(arr):
            out = np.column_stack([np.bincount(self.point_element, weights=arr[:, c], minlength=n)
                                   for c in range(3)])
            return out / counts[:, None]

        self.centroid = mean(cloud.points)
        normal = mean(aligned)
        normal /= np.maximum(np.linalg.norm(normal, axis=1), 1e-12)[:, None]
        self.normal = normal
        self.color = None if cloud.colors is None else mean(cloud.colors)
        self.neighbors = self._adjacency()

    def _adjacency(self):
        keys = self.keys
        lo = keys.min(axis=0) - 1
        dims = keys.max(axis=0) - lo + 2
        codes = _encode(keys, lo, dims)  # non-decreasing: rows are sorted by key
        per_key = np.max(np.bincount(np.unique(codes, return_inverse=True)[1].reshape(-1)))
        cols = []
        for off in np.vstack([np.zeros((1, 3), dtype=np.int64), _OFFSETS]):
            c = _encode(keys + off, lo, dims)
            left = np.searchsorted(codes, c, side="left")
            right = np.searchsorted(codes, c, side="right")
            for j in range(per_key):
                idx = left + j
                cols.append(np.where(idx < right, idx, -1))
        nb = np.column_stack(cols)
        nb[nb == np.arange(len(keys))[:, None]] = -1
        return nb

    def __len__(self):
        return len(self.keys)


class _Grower:
    """Competitive seeded region growing over element adjacency."""

    def __init__(self, el: _Elements, seed_spacing, w_spatial, w_normal, w_color):
        self.el = el
        self.seed_spacing = seed_spacing
        self.w_spatial = w_spatial
        self.w_normal = w_normal
        self.w_color = w_color if el.color is not None else 0.0

    def cost(self, idx, c_pos, c_nrm, c_col):
        el = self.el
        diff = el.centroid[idx] - c_pos
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff)) * (self.w_spatial / self.seed_spacing)
        d += self.w_normal * (1.0 - np.abs(el.normal[idx] @ c_nrm))
        if self.w_color:
            dc = el.color[idx] - c_col
            d += self.w_color * np.sqrt(np.einsum("ij,ij->i", dc, dc))
        return d

    def grow(self, seeds, centers, owner, labels=None):
        """Assign unowned elements to the seed reachable at lowest cost."""
        labels = range(len(seeds)) if labels is None else labels
        nbrs = self.el.neighbors
        heap = [(0.0, int(lab), int(e)) for lab, e in zip(labels, seeds) if owner[e] < 0]
        heapq.heapify(heap)
        while heap:
            _, s, e = heapq.heappop(heap)
            if owner[e] >= 0:
                continue
            owner[e] = s
            nb = nbrs[e]
            nb = nb[nb >= 0]
            nb = nb[owner[nb] < 0]
            if len(nb):
                costs = self.cost(nb, *centers[s])
                for c, n in zip(costs.tolist(), nb.tolist()):
                    heapq.heappush(heap, (c, s, n))
        return owner


def segment(cloud: PointCloud, seed_spacing: float = 0.3, voxel_size: float = 0.05,
            w_spatial: float = 0.4, w_normal: float = 1.0, w_color: float = 0.2,
            n_iter: int = 3, max_refine: int = 3) -> SupervoxelGraph:
    """VCCS-style supervoxels over `cloud`; priors are left unset.

    Seeds start on a regular grid of pitch `seed_spacing` and grow
    competitively over the `voxel_size` occupancy grid, minimising
    ``w_spatial * |p - c| / seed_spacing + w_normal * (1 - |n . n_c|)
    + w_color * |rgb - rgb_c|``. Clusters whose members deviate by more than
    45 degrees from the cluster normal receive an extra seed for up to
    `max_refine` additional rounds.
    """
    if cloud.normals is None:
        raise MissingNormals("supervoxel segmentation requires normals")
    if not seed_spacing > voxel_size > 0:
        raise ValueError("require seed_spacing > voxel_size > 0")
    if len(cloud) == 0:
        return SupervoxelGraph([], np.zeros((0, 2), dtype=np.int64))

    el = _Elements(cloud, voxel_size)
    grower = _Grower(el, seed_spacing, w_spatial, w_normal, w_color)

    # one seed per occupied seed cell: the element closest to the cell centre
    cell = voxel_keys(el.centroid, seed_spacing)
    d_center = np.linalg.norm(el.centroid - (cell + 0.5) * seed_spacing, axis=1)
    order = np.lexsort((np.arange(len(el)), d_center, cell[:, 2], cell[:, 1], cell[:, 0]))
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(cell[order][1:] != cell[order][:-1], axis=1)
    seeds = list(order[first])
    centers = [_element_center(el, s) for s in seeds]

    owner = None
    for it in range(max(1, n_iter) + max_refine):
        owner = grower.grow(seeds, centers, np.full(len(el), -1, dtype=np.int64))
        while np.any(owner < 0):
            # components without a seed get one of their own
            orphan = int(np.flatnonzero(owner < 0)[0])
            seeds.append(orphan)
            centers.append(_element_center(el, orphan))
            owner = grower.grow([orphan], centers, owner, labels=[len(seeds) - 1])

        centers = _cluster_centers(el, owner, len(seeds))
        new_seeds, new_centers, added = [], [], False
        for s, center in enumerate(centers):
            members = np.flatnonzero(owner == s)
            if len(members) == 0:
                continue
            new_seeds.append(members[np.argmin(grower.cost(members, *center))])
            new_centers.append(center)
            dev = 1.0 - np.abs(el.normal[members] @ center[1])
            misfit = members[dev > _MISFIT]
            if len(misfit) and it < max(1, n_iter) + max_refine - 1:
                mean = el.centroid[misfit].mean(axis=0)
                pick = misfit[np.argmin(np.linalg.norm(el.centroid[misfit] - mean, axis=1))]
                new_seeds.append(pick)
                new_centers.append(_element_center(el, pick))
                added = True
        if not added and it >= max(1, n_iter) - 1:
            break
        seeds, centers = new_seeds, new_centers

    centers = _cluster_centers(el, owner, owner.max() + 1)
    point_label = _assign_points(cloud, el, grower, owner, centers)
    return _build_graph(cloud, el, point_label)


def _element_center(el, e):
    return el.centroid[e], el.normal[e], None if el.color is None else el.color[e]


def _cluster_centers(el, owner, n_labels):
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n_labels + 1))
    centers = []
    for s in range(n_labels):
        members = order[bounds[s]:bounds[s + 1]]
        if len(members) == 0:
            centers.append((np.full(3, np.inf), np.array([0.0, 0.0, 1.0]), None))
            continue
        nrm = el.normal[members]
        nrm = nrm * np.where(nrm @ nrm[0] < 0, -1.0, 1.0)[:, None]
        nrm = nrm.mean(axis=0)
        nrm /= max(np.linalg.norm(nrm), 1e-12)
        col = None if el.color is None else el.color[members].mean(axis=0)
        centers.append((el.centroid[members].mean(axis=0), nrm, col))
    return centers


def _assign_points(cloud, el, grower, owner, centers) -> np.ndarray:
    """Give each point to the cheapest supervoxel owning its element or a neighbour."""
    c_pos = np.array([c[0] for c in centers])
    c_nrm = np.array([c[1] for c in centers])
    pe = el.point_element
    cand_el = np.column_stack([pe, el.neighbors[pe]])
    cand = np.where(cand_el >= 0, owner[np.maximum(cand_el, 0)], -1)
    safe = np.maximum(cand, 0)
    cost = grower.w_spatial * np.linalg.norm(cloud.points[:, None, :] - c_pos[safe], axis=2)
    cost /= grower.seed_spacing
    cost += grower.w_normal * (1.0 - np.abs(np.einsum("nkj,nj->nk", c_nrm[safe], cloud.normals)))
    if grower.w_color:
        c_col = np.array([c[2] if c[2] is not None else np.zeros(3) for c in centers])
        cost += grower.w_color * np.linalg.norm(cloud.colors[:, None, :] - c_col[safe], axis=2)
    cost[cand < 0] = np.inf
    # equal costs resolve to the lowest label
    cost = cost + 1e-12 * safe / max(len(centers), 1)
    return cand[np.arange(len(pe)), np.argmin(cost, axis=1)]


def _build_graph(cloud: PointCloud, el: _Elements, point_label: np.ndarray) -> SupervoxelGraph:
    labels_used, plabel = np.unique(point_label, return_inverse=True)
    plabel = plabel.reshape(-1)

    order = np.argsort(plabel, kind="stable")
    bounds = np.searchsorted(plabel[order], np.arange(len(labels_used) + 1))
    nodes = []
    for i in range(len(labels_used)):
        members = order[bounds[i]:bounds[i + 1]]
        pts = cloud.points[members]
        nrm = cloud.normals[members]
        nrm = nrm * np.where(nrm @ nrm[0] < 0, -1.0, 1.0)[:, None]
        mn = nrm.mean(axis=0)
        mn /= max(np.linalg.norm(mn), 1e-12)
        col = None if cloud.colors is None else cloud.colors[members].mean(axis=0)
        nodes.append(Supervoxel(i, members, pts, pts.mean(axis=0), mn, col))

    # adjacency: labels owning points in the same or 26-neighbouring voxels
    pairs = np.unique(np.column_stack([el.point_element, plabel]), axis=0)
    per_el = np.bincount(pairs[:, 0], minlength=len(el))
    start = np.concatenate([[0], np.cumsum(per_el)[:-1]])
    nb = np.column_stack([np.arange(len(el)), el.neighbors])[pairs[:, 0]]
    chunks = []
    for j in range(per_el.max()):
        has = per_el > j
        lab_j = np.full(len(el), -1, dtype=np.int64)
        lab_j[has] = pairs[start[has] + j, 1]
        other = np.where(nb >= 0, lab_j[np.maximum(nb, 0)], -1)
        a = np.repeat(pairs[:, 1], nb.shape[1])
        b = other.reshape(-1)
        ok = (b >= 0) & (a != b)
        chunks.append(np.column_stack([np.minimum(a[ok], b[ok]), np.maximum(a[ok], b[ok])]))
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)
    edges = np.unique(edges, axis=0) if len(edges) else edges
    return SupervoxelGraph(nodes, edges.reshape(-1, 2).astype(np.int64))


def assign_priors(graph: SupervoxelGraph, changes, radius: float) -> SupervoxelGraph:
    """Attach the fixed soft labels: (0.8, 0.2) where a change point lies within
    `radius` of a member point, (0.5, 0.5) otherwise.

    The fraction of members near a change point is kept as a diagnostic only.
    """
    pts = getattr(changes, "points", changes)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    n = len(graph.nodes)
    prior = np.tile(PRIOR_UNKNOWN, (n, 1)).astype(np.float64)
    frac = np.zeros(n)
    if len(pts) and n:
        index = SpatialIndex(pts)
        sizes = np.array([len(sv) for sv in graph.nodes])
        near = index.within(np.concatenate([sv.points for sv in graph.nodes]), radius)
        owner = np.repeat(np.arange(n), sizes)
        hits = np.bincount(owner, weights=near.astype(np.float64), minlength=n)
        frac = hits / sizes
        prior[hits > 0] = PRIOR_CHANGED
    return graph.with_priors(prior, frac)


class SupervoxelSegmenter(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`segment`.

    ``fit(X, normals=..., colors=...)`` accepts an (n, 3) array or a
    :class:`PointCloud`; ``labels_`` holds the supervoxel id of each point and
    ``graph_`` the adjacency graph.
    """

    def __init__(self, seed_spacing=0.3, voxel_size=0.05, w_spatial=0.4, w_normal=1.0,
                 w_color=0.2, n_iter=3):
        self.seed_spacing = seed_spacing
        self.voxel_size = voxel_size
        self.w_spatial = w_spatial
        self.w_normal = w_normal
        self.w_color = w_color
        self.n_iter = n_iter

    def fit(self, X, y=None, normals=None, colors=None):
        cloud = check_cloud(X, normals=normals, colors=colors, require_normals=True)
        self.graph_ = segment(cloud, self.seed_spacing, self.voxel_size, self.w_spatial,
                              self.w_normal, self.w_color, self.n_iter)
        self.labels_ = self.graph_.point_labels(len(cloud))
        self.n_supervoxels_ = len(self.graph_.nodes)
        return self
