"""Deterministic synthetic scan pairs with exact ground truth.

A scene is an open-top room (floor plus four walls) holding axis-aligned
boxes. The rescan applies a list of edits: rigid moves, additions and
removals. Everything is a pure function of the :class:`SceneSpec`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .discover import DetectedObject, connected_components
from .exceptions import SpecViolation
from .geom import RigidTransform, TriangleMesh, merge_meshes, rotation_about_axis
from .render import CameraPose

MOVE, ADD, REMOVE = "move", "add", "remove"


@dataclass(frozen=True)
class BoxSpec:
    """Box of `size` (dx, dy, dz) whose local frame sits at its bottom centre."""

    size: tuple
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def corners(self, pose: RigidTransform | None = None) -> np.ndarray:
        dx, dy, dz = self.size
        local = np.array([[sx * dx / 2, sy * dy / 2, z]
                          for sx in (-1, 1) for sy in (-1, 1) for z in (0.0, dz)])
        return (pose or self.pose).apply(local)


@dataclass(frozen=True)
class Edit:
    object_index: int
    kind: str
    transform: RigidTransform | None = None


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    room: tuple = (4.0, 4.0, 2.5)
    objects: tuple = ()
    edits: tuple = ()
    # rigid error applied to the whole rescan to mimic imperfect alignment
    misalignment: RigidTransform | None = None


@dataclass(frozen=True, eq=False)
class GroundTruth:
    changed_points_s: np.ndarray
    changed_points_r: np.ndarray
    transforms: list
    object_components: list
    # edit kinds whose points fall inside each gt component
    component_kinds: list

    @property
    def changed_points(self) -> np.ndarray:
        return np.concatenate([self.changed_points_s, self.changed_points_r])


def box_at(size, center_xy, yaw_deg=0.0) -> BoxSpec:
    """Box resting on the floor, centred at `center_xy`, rotated by `yaw_deg`."""
    rot = rotation_about_axis([0, 0, 1], np.radians(yaw_deg))
    return BoxSpec(tuple(float(s) for s in size),
                   RigidTransform(rot, [center_xy[0], center_xy[1], 0.0]))


def move_about_center(box: BoxSpec, translation, yaw_deg=0.0) -> RigidTransform:
    """World transform rotating `box` about its vertical axis, then translating it."""
    c = box.pose.translation
    rot = rotation_about_axis([0, 0, 1], np.radians(yaw_deg))
    return RigidTransform(rot, c - rot @ c + np.asarray(translation, dtype=np.float64))


def _grid_quad(origin, edge_u, edge_v, spacing, color) -> TriangleMesh:
    origin, edge_u, edge_v = (np.asarray(a, dtype=np.float64) for a in (origin, edge_u, edge_v))
    nu = max(1, int(np.ceil(np.linalg.norm(edge_u) / spacing - 1e-9)))
    nv = max(1, int(np.ceil(np.linalg.norm(edge_v) / spacing - 1e-9)))
    s = np.linspace(0.0, 1.0, nu + 1)
    t = np.linspace(0.0, 1.0, nv + 1)
    ss, tt = np.meshgrid(s, t, indexing="ij")
    verts = origin + ss.reshape(-1, 1) * edge_u + tt.reshape(-1, 1) * edge_v
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    colors = np.tile(np.asarray(color, dtype=np.float64), (len(verts), 1))
    return TriangleMesh(verts, faces, colors)


def room_mesh(room, spacing) -> TriangleMesh:
    w, d, h = room
    quads = [
        ((0, 0, 0), (w, 0, 0), (0, d, 0), (0.55, 0.55, 0.55)),  # floor
        ((0, 0, 0), (0, 0, h), (w, 0, 0), (0.80, 0.75, 0.70)),  # y = 0
        ((0, d, 0), (w, 0, 0), (0, 0, h), (0.70, 0.80, 0.75)),  # y = d
        ((0, 0, 0), (0, d, 0), (0, 0, h), (0.75, 0.70, 0.80)),  # x = 0
        ((w, 0, 0), (0, 0, h), (0, d, 0), (0.80, 0.80, 0.65)),  # x = w
    ]
    return merge_meshes(_grid_quad(o, u, v, spacing, c) for o, u, v, c in quads)


# distinct per-face tints so that box symmetries are visible in color
_FACE_TINTS = np.array([
    [0.95, 0.90, 0.30],
    [0.85, 0.25, 0.25],
    [0.25, 0.70, 0.30],
    [0.25, 0.35, 0.90],
    [0.75, 0.35, 0.85],
])


def _box_color(index, face):
    rng = np.random.default_rng(1000 + index)
    base = rng.uniform(0.2, 0.9, size=3)
    return np.clip(0.35 * base + 0.65 * _FACE_TINTS[face], 0.0, 1.0)


def box_mesh(box: BoxSpec, spacing, index=0, pose: RigidTransform | None = None) -> TriangleMesh:
    """Five visible faces (no bottom) of a box, tessellated in its local frame."""
    dx, dy, dz = box.size
    x0, y0 = -dx / 2, -dy / 2
    quads = [
        ((x0, y0, dz), (dx, 0, 0), (0, dy, 0)),  # top
        ((x0, y0, 0), (dx, 0, 0), (0, 0, dz)),  # -y
        ((x0, -y0, 0), (0, 0, dz), (dx, 0, 0)),  # +y
        ((x0, y0, 0), (0, 0, dz), (0, dy, 0)),  # -x
        ((-x0, y0, 0), (0, dy, 0), (0, 0, dz)),  # +x
    ]
    local = merge_meshes(_grid_quad(o, u, v, spacing, _box_color(index, k))
                         for k, (o, u, v) in enumerate(quads))
    return local.transformed(pose or box.pose)


def ring_poses(room, n_viewpoints, height=1.5, radius_frac=0.35, target_height=0.25,
               width=320, image_height=240, hfov_deg=60.0) -> list[CameraPose]:
    """Cameras on a horizontal ring, all looking at the room centre."""
    w, d, _ = room
    center = np.array([w / 2, d / 2])
    radius = radius_frac * min(w, d)
    fx = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    poses = []
    for k in range(n_viewpoints):
        a = 2 * np.pi * k / n_viewpoints
        eye = [center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height]
        target = [center[0], center[1], target_height]
        poses.append(CameraPose.look_at(eye, target, fx, fx, width / 2, image_height / 2,
                                        width, image_height))
    return poses


def _inside_room(points, room, tol=1e-9):
    lo = -tol
    hi = np.asarray(room, dtype=np.float64) + tol
    return bool(np.all(points >= lo) and np.all(points <= hi))


def validate(spec: SceneSpec) -> None:
    for i, box in enumerate(spec.objects):
        if min(box.size) <= 0:
            raise SpecViolation(f"object {i} has a non-positive dimension")
        if not _inside_room(box.corners(), spec.room):
            raise SpecViolation(f"object {i} lies outside the room")
    seen = set()
    for e in spec.edits:
        if not 0 <= e.object_index < len(spec.objects):
            raise SpecViolation(f"edit references unknown object {e.object_index}")
        if e.object_index in seen:
            raise SpecViolation(f"object {e.object_index} edited more than once")
        seen.add(e.object_index)
        if e.kind not in (MOVE, ADD, REMOVE):
            raise SpecViolation(f"unknown edit kind {e.kind!r}")
        if e.kind == MOVE:
            if e.transform is None:
                raise SpecViolation("move edit without a transform")
            box = spec.objects[e.object_index]
            if not _inside_room(box.corners(e.transform.compose(box.pose)), spec.room):
                raise SpecViolation(f"moved object {e.object_index} leaves the room")


def generate(spec: SceneSpec, sample_density: float = 400.0, n_viewpoints: int = 12,
             cell_size: float = 0.1):
    """Build (reference mesh, rescan mesh, poses, ground truth) for `spec`."""
    if not sample_density > 0:
        raise SpecViolation("sample_density must be positive")
    if n_viewpoints < 1:
        raise SpecViolation("need at least one viewpoint")
    validate(spec)
    spacing = 1.0 / np.sqrt(sample_density)
    edits = {e.object_index: e for e in spec.edits}

    room = room_mesh(spec.room, spacing)
    ref_parts, res_parts = [room], [room]
    gt_s, gt_r, gt_kind_s, gt_kind_r, transforms = [], [], [], [], []
    for i, box in enumerate(spec.objects):
        edit = edits.get(i)
        ref = box_mesh(box, spacing, index=i)
        if edit is None:
            ref_parts.append(ref)
            res_parts.append(ref)
        elif edit.kind == MOVE:
            moved = ref.transformed(edit.transform)
            ref_parts.append(ref)
            res_parts.append(moved)
            gt_s.append(ref.vertices)
            gt_r.append(moved.vertices)
            gt_kind_s.append(np.full(len(ref.vertices), i))
            gt_kind_r.append(np.full(len(moved.vertices), i))
            transforms.append(edit.transform)
        elif edit.kind == ADD:
            res_parts.append(ref)
            gt_r.append(ref.vertices)
            gt_kind_r.append(np.full(len(ref.vertices), i))
        else:
            ref_parts.append(ref)
            gt_s.append(ref.vertices)
            gt_kind_s.append(np.full(len(ref.vertices), i))

    reference = merge_meshes(ref_parts)
    rescan = merge_meshes(res_parts)
    if spec.misalignment is not None:
        rescan = rescan.transformed(spec.misalignment)

    pts_s = np.concatenate(gt_s) if gt_s else np.zeros((0, 3))
    pts_r = np.concatenate(gt_r) if gt_r else np.zeros((0, 3))
    owner = np.concatenate(gt_kind_s + gt_kind_r) if gt_s or gt_r else np.zeros(0, dtype=int)
    all_pts = np.concatenate([pts_s, pts_r])
    components = connected_components(all_pts, cell_size)
    kinds = []
    for comp in components:
        owners = sorted(set(owner[comp.point_indices].tolist()))
        kinds.append([edits[o].kind for o in owners])

    gt = GroundTruth(pts_s, pts_r, transforms, components, kinds)
    return reference, rescan, ring_poses(spec.room, n_viewpoints), gt


def write_ground_truth(gt: GroundTruth, directory) -> None:
    """Write ``gt_changed.ply`` and ``gt_transforms.json`` into `directory`."""
    from .ply import write_ply

    os.makedirs(directory, exist_ok=True)
    write_ply(os.path.join(directory, "gt_changed.ply"), gt.changed_points)
    with open(os.path.join(directory, "gt_transforms.json"), "w") as fh:
        json.dump({"transforms": [t.to_dict() for t in gt.transforms]}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def components_of(gt: GroundTruth) -> list[DetectedObject]:
    return gt.object_components


# Canonical scenes used by the tests and the CLI's `synth` command.

def single_move_scene(seed=0) -> SceneSpec:
    box = box_at((0.6, 0.6, 0.6), (1.6, 2.0))
    return SceneSpec(seed=seed, objects=(box,),
                     edits=(Edit(0, MOVE, move_about_center(box, (0.5, 0.0, 0.0))),))


def multi_object_scene(seed=0) -> SceneSpec:
    moved = box_at((0.6, 0.4, 0.5), (1.2, 1.2))
    added = box_at((0.4, 0.4, 0.4), (2.9, 1.3))
    removed = box_at((0.5, 0.5, 0.3), (1.4, 2.9))
    return SceneSpec(seed=seed, objects=(moved, added, removed), edits=(
        Edit(0, MOVE, move_about_center(moved, (0.4, 0.3, 0.0), yaw_deg=30.0)),
        Edit(1, ADD),
        Edit(2, REMOVE),
    ))


def slide_scene(seed=0) -> SceneSpec:
    box = box_at((1.5, 0.4, 0.4), (1.8, 2.0))
    return SceneSpec(seed=seed, objects=(box,),
                     edits=(Edit(0, MOVE, move_about_center(box, (0.3, 0.0, 0.0))),))


def two_move_scene(seed=0) -> SceneSpec:
    a = box_at((0.6, 0.5, 0.5), (1.2, 1.3))
    b = box_at((0.4, 0.4, 0.7), (2.7, 2.6))
    return SceneSpec(seed=seed, objects=(a, b), edits=(
        Edit(0, MOVE, move_about_center(a, (0.5, 0.2, 0.0))),
        Edit(1, MOVE, move_about_center(b, (-0.4, 0.3, 0.0), yaw_deg=20.0)),
    ))


def with_misalignment(spec: SceneSpec, rotation_deg: float, translation: float) -> SceneSpec:
    """Copy of `spec` whose rescan is off by a random rigid error.

    Axis and direction are drawn from ``spec.seed``; magnitudes are exact.
    """
    rng = np.random.default_rng(spec.seed)
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    err = RigidTransform(rotation_about_axis(axis, np.radians(rotation_deg)), translation * direction)
    return replace(spec, misalignment=err)


def static_scene(seed=0) -> SceneSpec:
    """Two untouched boxes: the rescan equals the reference."""
    return SceneSpec(seed=seed, objects=(box_at((0.6, 0.6, 0.6), (1.6, 2.0)),
                                         box_at((0.4, 0.4, 0.4), (2.8, 1.2))))


SCENES = {
    "single_move": single_move_scene,
    "multi_object": multi_object_scene,
    "slide": slide_scene,
    "two_move": two_move_scene,
    "static": static_scene,
}
