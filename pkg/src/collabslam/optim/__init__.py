"""Nonlinear least squares: pose-graph optimisation, local bundle adjustment, pausing."""

from .ba import BAProblem, BAResult, PoseFitResult, local_bundle_adjust, optimize_pose
from .pause import PauseGuard, PauseRegistry
from .pgo import Edge, PGOResult, PoseGraph, optimize_pose_graph

__all__ = [
    "BAProblem",
    "BAResult",
    "Edge",
    "PGOResult",
    "PauseGuard",
    "PauseRegistry",
    "PoseFitResult",
    "PoseGraph",
    "local_bundle_adjust",
    "optimize_pose",
    "optimize_pose_graph",
]
