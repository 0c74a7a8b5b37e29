"""Change-discovery metrics: voxel recall, object IoU, accuracy/completeness, motion recall."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyGroundTruth
from .geom import RigidTransform, SpatialIndex, rotation_angle, voxelize

DISCOVERY_IOU = 0.2
# (rotation degrees, translation meters) bands
BAND_10 = (10.0, 0.10)
BAND_20 = (20.0, 0.20)


def voxel_recall(predicted: set, ground_truth: set) -> float:
    """Fraction of ground-truth voxels also present in `predicted`."""
    predicted, ground_truth = set(predicted), set(ground_truth)
    if not ground_truth:
        if predicted:
            raise EmptyGroundTruth("ground truth is empty but predictions are not")
        return 1.0
    return len(predicted & ground_truth) / len(ground_truth)


def voxel_iou(a: set, b: set) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def match_objects(predicted_objects, gt_objects):
    """Greedy one-to-one matching by descending IoU.

    Returns a list with one ``(gt_id, iou, pred_id or None)`` per gt object,
    in gt order. Ties go to the lower gt id, then the lower prediction id.
    """
    pairs = []
    for gi, g in enumerate(gt_objects):
        for pi, p in enumerate(predicted_objects):
            iou = voxel_iou(set(g.voxels), set(p.voxels))
            if iou > 0:
                pairs.append((-iou, gi, pi))
    pairs.sort()
    used_g, used_p = {}, set()
    for neg, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g[gi] = (-neg, pi)
        used_p.add(pi)
    out = []
    for gi, g in enumerate(gt_objects):
        iou, pi = used_g.get(gi, (0.0, None))
        out.append((getattr(g, "id", gi), iou, pi))
    return out


def object_iou(predicted_objects, gt_objects, threshold: float = DISCOVERY_IOU) -> tuple[float, int]:
    """(mean IoU over all gt objects, number discovered at IoU > threshold)."""
    matches = match_objects(predicted_objects, gt_objects)
    if not matches:
        return float("nan"), 0
    ious = [m[1] for m in matches]
    return float(np.mean(ious)), int(sum(i > threshold for i in ious))


def accuracy_completeness(predicted_points, gt_points, dist: float) -> tuple[float, float]:
    """Share of predicted points near ground truth, and of gt points near a prediction.

    An empty side makes the corresponding ratio NaN.
    """
    if not dist > 0:
        raise ValueError("dist must be positive")
    pred = np.asarray(predicted_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        acc = float("nan") if len(pred) == 0 else 0.0
        comp = float("nan") if len(gt) == 0 else 0.0
        return acc, comp
    acc = float(np.mean(SpatialIndex(gt).within(pred, dist)))
    comp = float(np.mean(SpatialIndex(pred).within(gt, dist)))
    return acc, comp


def rotation_error_deg(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.degrees(rotation_angle(a.rotation @ b.rotation.T)))


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


@dataclass
class TransformScores:
    recall_10: float
    recall_20: float
    mre_deg: float
    mte_m: float
    mean_re_deg: float
    mean_te_m: float
    matches: list = field(default_factory=list)  # (gt index, pred index, rot deg, trans m)


def transform_scores(predicted, gt) -> TransformScores:
    predicted, gt = list(predicted), list(gt)
    pairs = []
    for gi, g in enumerate(gt):
        for pi, p in enumerate(predicted):
            pairs.append((rotation_error_deg(p, g), translation_error(p, g), gi, pi))
    pairs.sort()
    used_g, used_p, matches = set(), set(), []
    for rot, trans, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        matches.append((gi, pi, rot, trans))
    matches.sort()
    if not gt:
        nan = float("nan")
        return TransformScores(nan, nan, nan, nan, nan, nan, matches)

    def within(m, band):
        return m[2] < band[0] and m[3] < band[1]

    r10 = sum(within(m, BAND_10) for m in matches) / len(gt)
    good = [m for m in matches if within(m, BAND_20)]
    r20 = len(good) / len(gt)
    if good:
        rots = [m[2] for m in good]
        trans = [m[3] for m in good]
        stats = (float(np.median(rots)), float(np.median(trans)),
                 float(np.mean(rots)), float(np.mean(trans)))
    else:
        stats = (float("nan"),) * 4
    return TransformScores(r10, r20, *stats, matches)


def transform_metrics(predicted, gt) -> tuple[float, float, float, float]:
    """(recall at 10cm/10deg, recall at 20cm/20deg, median rot error, median trans error)."""
    s = transform_scores(predicted, gt)
    return s.recall_10, s.recall_20, s.mre_deg, s.mte_m


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else x


@dataclass
class EvalReport:
    voxel_recall: float | None
    object_ious: list
    mean_iou: float | None
    discovered_count: int
    accuracy: float | None
    completeness: float | None
    transform_recall_10: float | None
    transform_recall_20: float | None
    mre_deg: float | None
    mte_m: float | None
    mean_re_deg: float | None = None
    mean_te_m: float | None = None
    gt_object_count: int = 0

    def to_dict(self) -> dict:
        return {k: _nan_to_none(v) for k, v in self.__dict__.items()}


def evaluate(changed_points, objects, predicted_transforms, gt, cell_size: float = 0.1,
             accuracy_dist: float = 0.05) -> EvalReport:
    """All metrics for one run against a ground truth holding ``changed_points``,
    ``transforms`` and ``object_components``."""
    gt_pts = np.asarray(gt.changed_points, dtype=np.float64).reshape(-1, 3)
    pred_vox = voxelize(changed_points, cell_size)
    gt_vox = voxelize(gt_pts, cell_size)
    recall = voxel_recall(pred_vox, gt_vox) if gt_vox else None
    matches = match_objects(objects, gt.object_components)
    mean_iou, found = object_iou(objects, gt.object_components)
    acc, comp = accuracy_completeness(changed_points, gt_pts, accuracy_dist)
    ts = transform_scores(predicted_transforms, gt.transforms)
    return EvalReport(
        voxel_recall=recall,
        object_ious=[[gid, iou] for gid, iou, _ in matches],
        mean_iou=_nan_to_none(mean_iou),
        discovered_count=found,
        accuracy=_nan_to_none(acc),
        completeness=_nan_to_none(comp),
        transform_recall_10=_nan_to_none(ts.recall_10),
        transform_recall_20=_nan_to_none(ts.recall_20),
        mre_deg=_nan_to_none(ts.mre_deg),
        mte_m=_nan_to_none(ts.mte_m),
        mean_re_deg=_nan_to_none(ts.mean_re_deg),
        mean_te_m=_nan_to_none(ts.mean_te_m),
        gt_object_count=len(gt.object_components),
    )
