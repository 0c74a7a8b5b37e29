"""Object discovery from changes between two aligned 3D scans.

Depth inconsistencies seed a change prior, sequential RANSAC recovers the
rigid motions of moved objects, and a graph cut per motion spreads the
change label over every supervoxel that moved consistently.
"""

from .exceptions import (
    DegenerateInput,
    DimensionMismatch,
    EmptyGroundTruth,
    EmptyIndex,
    EmptyScene,
    GraphMismatch,
    InvalidDepth,
    InvalidRotation,
    MissingColors,
    MissingNormals,
    ParseError,
    SceneDiffError,
    SpecViolation,
    StageError,
    UnsetPriors,
)
from .geom import PointCloud, RigidTransform, SpatialIndex, TriangleMesh, fit_rigid, voxelize
from .motion import MotionEstimator, MotionHypothesis, dominant_transforms, ransac_transform
from .optimize import GraphCutLabeler, Labeling, solve_labeling
from .pipeline import ChangeDetector, PipelineConfig, RunReport, run, run_scene
from .supervoxel import SupervoxelSegmenter

__version__ = "0.1.0"

__all__ = [
    "ChangeDetector",
    "DegenerateInput",
    "DimensionMismatch",
    "EmptyGroundTruth",
    "EmptyIndex",
    "EmptyScene",
    "GraphCutLabeler",
    "GraphMismatch",
    "InvalidDepth",
    "InvalidRotation",
    "Labeling",
    "MissingColors",
    "MissingNormals",
    "MotionEstimator",
    "MotionHypothesis",
    "ParseError",
    "PipelineConfig",
    "PointCloud",
    "RigidTransform",
    "RunReport",
    "SceneDiffError",
    "SpatialIndex",
    "SpecViolation",
    "StageError",
    "SupervoxelSegmenter",
    "TriangleMesh",
    "UnsetPriors",
    "dominant_transforms",
    "fit_rigid",
    "ransac_transform",
    "run",
    "run_scene",
    "solve_labeling",
    "voxelize",
]
