"""End-to-end orchestration: detect, segment, match, estimate motions, cut, discover."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator

from . import discover, features, motion, optimize
from .detect import ChangePoints, detect_changes
from .evaluation import EvalReport, evaluate
from .exceptions import EmptyScene, InvalidRotation, ParseError, SceneDiffError, StageError
from .geom import PointCloud, RigidTransform, SpatialIndex, TriangleMesh, is_rotation, voxel_keys
from .render import CameraPose, render_depth
from .supervoxel import assign_priors, merge_graphs, segment

log = logging.getLogger(__name__)

MODES = ("full", "before-optim", "taneja-baseline")


@dataclass
class PipelineConfig:
    tau: float = 0.05
    # supervoxels
    seed_spacing: float = 0.2
    voxel_size: float = 0.05
    w_spatial: float = 0.4
    w_normal: float = 1.0
    w_color: float = 0.2
    prior_radius: float = 0.05
    # descriptors and matching
    descriptor_radius: float = 0.26
    descriptor_grid: float = 0.025
    spatial_weight: float = 1.0
    color_weight: float = 100.0
    delta_static: float = 0.1
    persistence_radius: float = 0.03
    # RANSAC
    ransac_t: float = 0.05
    ransac_max_iters: int = 2000
    k: int = 5
    min_inliers: int = 40
    seed: int = 0
    # graph cut
    lam: float = 0.5
    epsilon_t: float = 0.05
    support_margin: float = 0.1
    gamma: float = 1.0
    # discovery and evaluation
    cell_size: float = 0.1
    visible_only: bool = False
    visibility_tol: float = 0.03
    accuracy_dist: float = 0.05
    mode: str = "full"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        positive = ("tau", "seed_spacing", "voxel_size", "prior_radius", "descriptor_radius",
                    "descriptor_grid", "delta_static", "ransac_t", "epsilon_t", "cell_size",
                    "visibility_tol", "accuracy_dist")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.seed_spacing > self.voxel_size:
            raise ValueError("seed_spacing must exceed voxel_size")
        for name in ("w_spatial", "w_normal", "w_color", "spatial_weight", "color_weight", "lam", "persistence_radius",
                     "support_margin", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.k < 1 or self.ransac_max_iters < 1 or self.min_inliers < 3:
            raise ValueError("k and ransac_max_iters must be >= 1, min_inliers >= 3")

    def replace(self, **changes) -> "PipelineConfig":
        data = asdict(self)
        data.update(changes)
        return PipelineConfig(**data)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        """Read a TOML file of ``key = value`` lines (tables are flattened)."""
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ParseError(f"{path}: {exc}", getattr(exc, "lineno", None)) from exc
        flat = {}
        for key, value in raw.items():
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ParseError(f"{path}: unknown config keys {unknown}")
        return cls(**flat)


@dataclass
class RunReport:
    config: dict
    timings: dict
    hypotheses: list
    objects: list
    evaluation: dict | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "config": self.config,
            "hypotheses": self.hypotheses,
            "objects": self.objects,
            "evaluation": self.evaluation,
            "counts": self.counts,
        }
        if include_timings:
            out["timings"] = self.timings
        return out


@dataclass
class SceneResult:
    """In-memory outputs of one run, for tests and debug dumps."""

    report: RunReport
    changes: ChangePoints
    changed_points: np.ndarray
    objects: list
    hypotheses: list
    clouds: tuple = ()
    graph: object = None
    labeling: object = None
    per_transform: list = field(default_factory=list)
    depth_maps: list = field(default_factory=list)
    eval_report: EvalReport | None = None


class _Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timer.timings[name] = timer.timings.get(name, 0.0) + time.perf_counter() - self.t0
                if exc is not None and not isinstance(exc, StageError):
                    raise StageError(name, exc) from exc
                return False

        return _Ctx()


def visible_cloud(mesh: TriangleMesh, poses, depth_maps, tol: float) -> tuple[PointCloud, np.ndarray]:
    """Mesh vertices seen from at least one viewpoint.

    A vertex is seen when it projects inside the image in front of the
    camera and its depth agrees with the rendered depth within `tol`.
    Returns the cloud and the kept vertex indices.
    """
    from .render import project

    seen = np.zeros(len(mesh.vertices), dtype=bool)
    for pose, depth in zip(poses, depth_maps):
        u, v, z = project(mesh.vertices, pose)
        front = z > 0
        x = np.full(len(z), -1, dtype=np.int64)
        y = np.full(len(z), -1, dtype=np.int64)
        x[front] = np.floor(u[front])
        y[front] = np.floor(v[front])
        ok = front & (x >= 0) & (x < pose.width) & (y >= 0) & (y < pose.height)
        idx = np.flatnonzero(ok)
        d = depth.values[y[idx], x[idx]]
        hit = (d > 0) & (np.abs(d - z[idx]) <= tol + 0.01 * z[idx])
        seen[idx[hit]] = True
    keep = np.flatnonzero(seen)
    cloud = mesh.to_cloud()
    return cloud.subset(keep), keep


def _support_regions(hyp, clouds, margin):
    ps, pr = hyp.inliers.endpoints(clouds[0], clouds[1])
    return {0: optimize.SupportRegion(ps, margin), 1: optimize.SupportRegion(pr, margin)}


def _points_of(graph, labels) -> np.ndarray:
    chunks = [sv.points for sv, on in zip(graph.nodes, labels) if on]
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def _attach_transforms(objects, graph, explained, cell_size):
    """Give each object the transform that explains most of its voxels.

    `explained` holds, per transform, a node mask of changed supervoxels that
    are consistent under that transform. Objects found by the unary term
    alone (added or removed geometry) keep no transform.
    """
    if not explained:
        return objects
    keys, owner = [], []
    for t_id, mask in enumerate(explained):
        for node in np.flatnonzero(mask):
            pts = graph.nodes[node].points
            keys.append(voxel_keys(pts, cell_size))
            owner.append(np.full(len(pts), t_id))
    if not keys:
        return objects
    lookup: dict = {}
    for k, o in zip(np.concatenate(keys).tolist(), np.concatenate(owner).tolist()):
        lookup.setdefault(tuple(k), set()).add(o)
    out = []
    for obj in objects:
        votes = np.zeros(len(explained), dtype=np.int64)
        for v in obj.voxels:
            for o in lookup.get(v, ()):
                votes[o] += 1
        # below a tenth of the object the transform is incidental contact
        if votes.max() > 0 and votes.max() >= 0.1 * obj.voxel_count:
            out.append(obj.with_transform(int(np.argmax(votes))))
        else:
            out.append(obj)
    return out


def run_scene(reference: TriangleMesh, rescan: TriangleMesh, poses, config: PipelineConfig,
              gt=None, keep_intermediates: bool = False) -> SceneResult:
    """Run every stage on in-memory meshes.

    `gt` is an object with ``changed_points``, ``transforms`` and
    ``object_components`` (see :mod:`scenediff.synth`), or None.
    """
    cfg = config
    poses = list(poses)
    if len(reference.vertices) == 0 or len(rescan.vertices) == 0:
        raise EmptyScene("reference and rescan must both contain geometry")
    if not poses:
        raise EmptyScene("at least one viewpoint is required")
    timer = _Timer()
    t_start = time.perf_counter()

    with timer.stage("render"):
        depth_maps = [(render_depth(reference, p), render_depth(rescan, p)) for p in poses]
    with timer.stage("detect"):
        changes = detect_changes(reference, rescan, poses, cfg.tau, depth_maps=depth_maps)

    hypotheses: list = []
    graph = labeling = None
    per_transform: list = []
    explained: list = []  # per transform: changed nodes the motion accounts for
    clouds: tuple = ()

    if cfg.mode == "before-optim":
        changed = changes.points
    else:
        with timer.stage("visibility"):
            if cfg.visible_only:
                cloud_s, _ = visible_cloud(reference, poses, [d[0] for d in depth_maps],
                                           cfg.visibility_tol)
                cloud_r, _ = visible_cloud(rescan, poses, [d[1] for d in depth_maps],
                                           cfg.visibility_tol)
            else:
                cloud_s, cloud_r = reference.to_cloud(), rescan.to_cloud()
            if len(cloud_s) == 0 or len(cloud_r) == 0:
                raise EmptyScene("no mesh vertex is visible from the given viewpoints")
            clouds = (cloud_s, cloud_r)
        with timer.stage("supervoxel"):
            graphs = []
            for cloud in clouds:
                g = segment(cloud, cfg.seed_spacing, cfg.voxel_size, cfg.w_spatial,
                            cfg.w_normal, cfg.w_color)
                graphs.append(assign_priors(g, changes, cfg.prior_radius))
            graph = merge_graphs(graphs)

        if cfg.mode == "taneja-baseline":
            with timer.stage("optimize"):
                colors = np.array([sv.mean_color if sv.mean_color is not None
                                   else np.full(3, np.nan) for sv in graph.nodes])
                weights = optimize.taneja_binary(graph, colors, cfg.gamma)
                labeling = optimize.solve_labeling(
                    graph, None, None, optimize.EnergyParams(cfg.lam, cfg.epsilon_t), weights=weights)
        else:
            with timer.stage("features"):
                idx_s = features.downsample_for_matching(cloud_s, cfg.descriptor_grid)
                idx_r = features.downsample_for_matching(cloud_r, cfg.descriptor_grid)
                sub_s, sub_r = cloud_s.subset(idx_s), cloud_r.subset(idx_r)
                desc_s = features.compute_fpfh(sub_s, cfg.descriptor_radius)
                desc_r = features.compute_fpfh(sub_r, cfg.descriptor_radius)
                corrs = features.match_features(
                    features.augment_descriptors(desc_s, sub_s.points, sub_s.colors,
                                                 cfg.spatial_weight, cfg.color_weight),
                    features.augment_descriptors(desc_r, sub_r.points, sub_r.colors,
                                                 cfg.spatial_weight, cfg.color_weight))
                corrs = features.filter_static(corrs, sub_s, sub_r, cfg.delta_static)
                # re-index into the full working clouds
                corrs = features.Correspondences(idx_s[corrs.index_s], idx_r[corrs.index_r],
                                                 corrs.distance_feature)
                indexes = {0: SpatialIndex(cloud_s.points), 1: SpatialIndex(cloud_r.points)}
                if cfg.persistence_radius > 0:
                    corrs = features.filter_persistent(corrs, cloud_s, cloud_r,
                                                       cfg.persistence_radius, indexes[0], indexes[1])
            with timer.stage("motion"):
                hypotheses = motion.dominant_transforms(
                    corrs, cloud_s, cloud_r, t=cfg.ransac_t, k=cfg.k, seed=cfg.seed,
                    max_iters=cfg.ransac_max_iters, delta_static=cfg.delta_static,
                    min_inliers=cfg.min_inliers)
            with timer.stage("optimize"):
                params = optimize.EnergyParams(cfg.lam, cfg.epsilon_t)
                for h in hypotheses:
                    consistent = optimize.consistency_mask(
                        graph, h.transform, indexes, cfg.epsilon_t,
                        _support_regions(h, clouds, cfg.support_margin))
                    lab = optimize.solve_labeling(
                        graph, h.transform, indexes, params,
                        weights=optimize.consistency_weights(graph, consistent))
                    per_transform.append(lab)
                    explained.append(lab.labels & consistent)
                labeling = optimize.fuse_labelings(per_transform, optimize.prior_labeling(graph))
        changed = _points_of(graph, labeling.labels)

    with timer.stage("discover"):
        objects = discover.connected_components(changed, cfg.cell_size)
        if graph is not None:
            objects = _attach_transforms(objects, graph, explained, cfg.cell_size)

    eval_report = None
    if gt is not None:
        with timer.stage("evaluate"):
            eval_report = evaluate(changed, objects, [h.transform for h in hypotheses], gt,
                                   cfg.cell_size, cfg.accuracy_dist)
    timer.timings["total"] = time.perf_counter() - t_start

    counts = {
        "change_points": int(len(changes)),
        "changed_points": int(len(changed)),
        "supervoxels": 0 if graph is None else len(graph.nodes),
        "changed_supervoxels": 0 if labeling is None else int(labeling.labels.sum()),
    }
    report = RunReport(
        config=asdict(cfg),
        timings=timer.timings,
        hypotheses=[h.to_dict() for h in hypotheses],
        objects=[o.to_dict() for o in objects],
        evaluation=None if eval_report is None else eval_report.to_dict(),
        counts=counts,
    )
    return SceneResult(
        report=report, changes=changes, changed_points=changed, objects=objects,
        hypotheses=hypotheses, clouds=clouds if keep_intermediates else (),
        graph=graph if keep_intermediates else None, labeling=labeling,
        per_transform=per_transform, depth_maps=depth_maps if keep_intermediates else [],
        eval_report=eval_report,
    )


# ---------------------------------------------------------------- file formats

def load_poses(path) -> list[CameraPose]:
    """Parse the pose file: blocks of 4 lines separated by blank lines.

    Line 1 holds ``fx fy cx cy width height``; lines 2 to 4 the rows of
    ``[R | Tr]`` mapping world to camera coordinates.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    poses, block = [], []
    for lineno, raw in enumerate(lines + [""], start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            block.append((lineno, text))
            continue
        if block:
            poses.append(_parse_pose_block(block))
            block = []
    return poses


def _parse_pose_block(block) -> CameraPose:
    first_line = block[0][0]
    if len(block) != 4:
        raise ParseError(f"pose block starting at line {first_line} has {len(block)} lines, "
                         "expected 4", first_line)
    rows = []
    for k, (lineno, text) in enumerate(block):
        try:
            vals = [float(v) for v in text.split()]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}", lineno) from exc
        expected = 6 if k == 0 else 4
        if len(vals) != expected or not np.all(np.isfinite(vals)):
            raise ParseError(f"line {lineno}: expected {expected} finite numbers, got {text!r}",
                             lineno)
        rows.append(vals)
    fx, fy, cx, cy, width, height = rows[0]
    if width != int(width) or height != int(height):
        raise ParseError(f"line {first_line}: image size must be integral", first_line)
    m = np.array(rows[1:])
    if not is_rotation(m[:, :3], tol=1e-6):
        raise InvalidRotation(f"pose block at line {first_line}: rotation is not orthonormal")
    try:
        return CameraPose(fx, fy, cx, cy, m[:, :3], m[:, 3], int(width), int(height))
    except SceneDiffError:
        raise
    except ValueError as exc:
        raise ParseError(f"pose block at line {first_line}: {exc}", first_line) from exc


def write_poses(path, poses) -> None:
    blocks = []
    for p in poses:
        lines = [" ".join(repr(float(v)) for v in (p.fx, p.fy, p.cx, p.cy))
                 + f" {int(p.width)} {int(p.height)}"]
        for r in range(3):
            row = list(p.rotation[r]) + [p.translation[r]]
            lines.append(" ".join(repr(float(v)) for v in row))
        blocks.append("\n".join(lines))
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks) + "\n")


@dataclass
class LoadedGroundTruth:
    changed_points: np.ndarray
    transforms: list
    object_components: list


def load_ground_truth(directory, cell_size: float = 0.1) -> LoadedGroundTruth:
    from .ply import read_point_cloud

    pts = read_point_cloud(os.path.join(directory, "gt_changed.ply")).points
    tf_path = os.path.join(directory, "gt_transforms.json")
    transforms = []
    if os.path.exists(tf_path):
        with open(tf_path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{tf_path}: {exc}", exc.lineno) from exc
        transforms = [RigidTransform.from_dict(d) for d in data.get("transforms", [])]
    comps = discover.connected_components(pts, cell_size)
    return LoadedGroundTruth(pts, transforms, comps)


def _round_floats(obj, digits: int = 6):
    if isinstance(obj, float):
        if not np.isfinite(obj):
            return None
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, (np.floating,)):
        return _round_floats(float(obj), digits)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist(), digits)
    return obj


def report_json(report, include_timings: bool = False) -> str:
    data = report.to_dict(include_timings) if isinstance(report, RunReport) else report
    return json.dumps(_round_floats(data), sort_keys=True, indent=2) + "\n"


def write_report(report, path, include_timings: bool = False) -> None:
    """Deterministic JSON: sorted keys, floats at 6 significant digits.

    Timings are left out unless asked for, so identical runs produce
    byte-identical files.
    """
    text = report_json(report, include_timings)
    with open(path, "w") as fh:
        fh.write(text)


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def run(reference, rescan, poses, config: PipelineConfig | None = None, gt=None,
        out_dir=None, dump_debug: bool = False) -> RunReport:
    """Run from files in the standard input layout and optionally write outputs."""
    from .ply import read_mesh, write_ply

    config = config or PipelineConfig()
    with _Timer().stage("load"):
        ref_mesh = read_mesh(reference)
        res_mesh = read_mesh(rescan)
        pose_list = load_poses(poses)
        gt_data = None if gt is None else load_ground_truth(gt, config.cell_size)
    result = run_scene(ref_mesh, res_mesh, pose_list, config, gt_data, keep_intermediates=dump_debug)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_report(result.report, os.path.join(out_dir, "report.json"))
        with open(os.path.join(out_dir, "timings.json"), "w") as fh:
            json.dump(_round_floats(result.report.timings), fh, sort_keys=True, indent=2)
            fh.write("\n")
        write_ply(os.path.join(out_dir, "changed.ply"), result.changed_points,
                  colors=_object_colors(result))
        if dump_debug:
            _dump_debug(result, out_dir)
    return result.report


def _object_colors(result: SceneResult) -> np.ndarray:
    colors = np.full((len(result.changed_points), 3), 0.5)
    if not len(result.changed_points):
        return colors
    rng = np.random.default_rng(0)
    palette = rng.random((max(len(result.objects), 1), 3))
    keys = voxel_keys(result.changed_points, result.report.config["cell_size"])
    lookup = {}
    for obj in result.objects:
        for v in obj.voxels:
            lookup[v] = obj.id
    for row, key in enumerate(map(tuple, keys.tolist())):
        if key in lookup:
            colors[row] = palette[lookup[key]]
    return colors


def _dump_debug(result: SceneResult, out_dir) -> None:
    from .ply import write_ply
    from .render import write_depth_pgm

    dbg = os.path.join(out_dir, "debug")
    os.makedirs(dbg, exist_ok=True)
    for i, (d_s, d_r) in enumerate(result.depth_maps):
        write_depth_pgm(os.path.join(dbg, f"depth_ref_{i:03d}.pgm"), d_s)
        write_depth_pgm(os.path.join(dbg, f"depth_rescan_{i:03d}.pgm"), d_r)
        mask = (d_s.values > 0) & (d_r.values > 0) & (np.abs(d_s.values - d_r.values) > result.report.config["tau"])
        with open(os.path.join(dbg, f"mask_{i:03d}.pgm"), "wb") as fh:
            fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
            fh.write((mask.astype(np.uint8) * 255).tobytes())
    write_ply(os.path.join(dbg, "change_points.ply"), result.changes.points)
    if result.graph is not None:
        rng = np.random.default_rng(0)
        for scan, name in ((0, "supervoxels_ref.ply"), (1, "supervoxels_rescan.ply")):
            nodes = [sv for sv in result.graph.nodes if sv.scan == scan]
            if not nodes:
                continue
            pts = np.concatenate([sv.points for sv in nodes])
            cols = np.concatenate([np.tile(rng.random(3), (len(sv.points), 1)) for sv in nodes])
            write_ply(os.path.join(dbg, name), pts, colors=cols)
        for t_id, lab in enumerate(result.per_transform):
            pts = _points_of(result.graph, lab.labels)
            write_ply(os.path.join(dbg, f"labels_transform_{t_id}.ply"), pts,
                      colors=np.tile([1.0, 0.2, 0.2], (len(pts), 1)))


class ChangeDetector(BaseEstimator):
    """Estimator facade over :func:`run_scene`.

    ``fit((reference_mesh, rescan_mesh, poses))`` runs the pipeline and sets
    ``objects_``, ``hypotheses_``, ``changed_points_`` and ``report_``.
    ``predict`` returns, for query points, the id of the discovered object
    whose voxel contains them, or -1.
    """

    def __init__(self, mode="full", k=5, lam=0.5, epsilon_t=0.05, tau=0.05, seed=0,
                 cell_size=0.1):
        self.mode = mode
        self.k = k
        self.lam = lam
        self.epsilon_t = epsilon_t
        self.tau = tau
        self.seed = seed
        self.cell_size = cell_size

    def _config(self) -> PipelineConfig:
        return PipelineConfig(mode=self.mode, k=self.k, lam=self.lam, epsilon_t=self.epsilon_t,
                              tau=self.tau, seed=self.seed, cell_size=self.cell_size)

    def fit(self, X, y=None):
        reference, rescan, poses = X
        result = run_scene(reference, rescan, poses, self._config(), gt=y)
        self.objects_ = result.objects
        self.hypotheses_ = result.hypotheses
        self.changed_points_ = result.changed_points
        self.report_ = result.report
        return self

    def predict(self, X):
        pts = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        out = np.full(len(pts), -1, dtype=np.int64)
        lookup = {}
        for obj in self.objects_:
            for v in obj.voxels:
                lookup[v] = obj.id
        for row, key in enumerate(map(tuple, voxel_keys(pts, self.cell_size).tolist())):
            out[row] = lookup.get(key, -1)
        return out
