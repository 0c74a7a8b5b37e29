"""Dominant rigid motions between two scans by sequential RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import DegenerateInput
from .features import Correspondences
from .geom import PointCloud, RigidTransform, fit_rigid

SAMPLE_SIZE = 3
NEAR_IDENTITY_DEG = 2.0
_BATCH = 256
_MAX_REFITS = 10


@dataclass(frozen=True, eq=False)
class MotionHypothesis:
    transform: RigidTransform
    inliers: Correspondences

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)

    def to_dict(self) -> dict:
        return {
            "rotation": self.transform.rotation.reshape(-1).tolist(),
            "translation": self.transform.translation.tolist(),
            "inlier_count": self.inlier_count,
        }


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _batch_fit(src: np.ndarray, dst: np.ndarray):
    """Kabsch on a stack of (b, 3, 3) triples; returns R, t and a validity mask."""
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    a = src - mu_s
    b = dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    valid = sv[:, 1] > 1e-10 * np.maximum(sv[:, 0], 1e-300)
    h = np.einsum("bki,bkj->bij", a, b)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    d = np.sign(np.linalg.det(v @ np.swapaxes(u, 1, 2)))
    d[d == 0] = 1.0
    v[:, :, 2] *= d[:, None]
    rot = v @ np.swapaxes(u, 1, 2)
    trans = mu_d[:, 0] - np.einsum("bij,bj->bi", rot, mu_s[:, 0])
    return rot, trans, valid


def _residuals(transform: RigidTransform, ps, pr) -> np.ndarray:
    return np.linalg.norm(transform.apply(ps) - pr, axis=1)


def _draw_samples(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """`count` rows of 3 distinct indices, each row uniform over triples."""
    out = np.empty((count, SAMPLE_SIZE), dtype=np.int64)
    for r in range(count):
        out[r] = rng.choice(n, size=SAMPLE_SIZE, replace=False)
    return out


def ransac_transform(corrs: Correspondences, cloud_s, cloud_r, t: float = 0.05,
                     max_iters: int = 2000, seed=0) -> MotionHypothesis | None:
    """Best rigid transform by 3-point RANSAC, or None when no model exists.

    Candidates are ranked by inlier count, ties going to the earliest
    iteration. The winner is refit on its inliers until the inlier set is
    stable, so the returned transform classifies its own inliers as inliers.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    n = len(corrs)
    if n < SAMPLE_SIZE:
        return None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ps, pr = corrs.endpoints(_points(cloud_s), _points(cloud_r))

    samples = _draw_samples(rng, n, max_iters)
    best_count, best_iter, best_model = 0, -1, None
    for start in range(0, max_iters, _BATCH):
        idx = samples[start:start + _BATCH]
        rot, trans, valid = _batch_fit(ps[idx], pr[idx])
        moved = np.einsum("bij,nj->bni", rot, ps) + trans[:, None, :]
        counts = np.sum(np.sum((moved - pr[None]) ** 2, axis=2) <= t * t, axis=1)
        counts[~valid] = -1
        b = int(np.argmax(counts))
        if counts[b] > best_count:
            best_count, best_iter = int(counts[b]), start + b
            best_model = RigidTransform(rot[b], trans[b])
    if best_model is None or best_count < SAMPLE_SIZE:
        return None

    model = best_model
    mask = _residuals(model, ps, pr) <= t
    for _ in range(_MAX_REFITS):
        try:
            refit = fit_rigid(ps[mask], pr[mask])
        except DegenerateInput:
            break
        new_mask = _residuals(refit, ps, pr) <= t
        if new_mask.sum() < mask.sum():
            break
        model = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = _residuals(model, ps, pr) <= t
    if mask.sum() < SAMPLE_SIZE:
        return None
    return MotionHypothesis(model, corrs[mask])


def is_near_identity(transform: RigidTransform, delta_static: float,
                     max_angle_deg: float = NEAR_IDENTITY_DEG) -> bool:
    return (np.degrees(transform.angle) < max_angle_deg
            and float(np.linalg.norm(transform.translation)) < delta_static)


def dominant_transforms(corrs: Correspondences, cloud_s, cloud_r, t: float = 0.05, k: int = 5,
                        seed=0, max_iters: int = 2000, delta_static: float = 0.1,
                        min_inliers: int = SAMPLE_SIZE) -> list[MotionHypothesis]:
    """Up to `k` motions found by sequential RANSAC with inlier removal.

    Near-identity motions are discarded (their inliers still removed) since
    static background must not produce a motion. Search stops when RANSAC
    finds no model or the best one has fewer than `min_inliers` inliers.
    Sorted by inlier count, largest first.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)
    remaining = corrs
    found: list[MotionHypothesis] = []
    while len(found) < k and len(remaining) >= SAMPLE_SIZE:
        hyp = ransac_transform(remaining, cloud_s, cloud_r, t, max_iters, rng)
        if hyp is None or hyp.inlier_count < max(min_inliers, SAMPLE_SIZE):
            break
        keep = np.ones(len(remaining), dtype=bool)
        inlier_keys = set(zip(hyp.inliers.index_s.tolist(), hyp.inliers.index_r.tolist()))
        for row, key in enumerate(zip(remaining.index_s.tolist(), remaining.index_r.tolist())):
            if key in inlier_keys:
                keep[row] = False
        remaining = remaining[keep]
        if not is_near_identity(hyp.transform, delta_static):
            found.append(hyp)
    # stable sort keeps discovery order among equal counts
    found.sort(key=lambda h: -h.inlier_count)
    return found


class MotionEstimator(BaseEstimator):
    """Estimator wrapper around :func:`dominant_transforms`.

    ``fit(corrs, cloud_s, cloud_r)`` sets ``hypotheses_``.
    """

    def __init__(self, t=0.05, k=5, max_iters=2000, delta_static=0.1, min_inliers=3, seed=0):
        self.t = t
        self.k = k
        self.max_iters = max_iters
        self.delta_static = delta_static
        self.min_inliers = min_inliers
        self.seed = seed

    def fit(self, corrs, cloud_s, cloud_r):
        self.hypotheses_ = dominant_transforms(
            corrs, cloud_s, cloud_r, t=self.t, k=self.k, seed=self.seed,
            max_iters=self.max_iters, delta_static=self.delta_static,
            min_inliers=self.min_inliers)
        self.transforms_ = [h.transform for h in self.hypotheses_]
        return self

    def to_json(self) -> list:
        return [h.to_dict() for h in self.hypotheses_]
