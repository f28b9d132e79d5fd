"""Patch-graph visual SLAM backend.

A numpy/scipy library implementing the geometric core of a patch-based
monocular SLAM system: SE(3)/Sim(3) types, a patch-graph scene representation
with direction-flippable edges, confidence-weighted bundle adjustment with
dense and block-sparse Schur solvers, proximity loop closure, classical drift
estimation (triangulation + RANSAC-aligned point clouds), Sim(3) pose-graph
optimization, and an evaluation harness with a synthetic-scene oracle.
"""

from . import ba, drift, loop, pipeline, posegraph, synthetic, trajectory
from .errors import PatchSlamError
from .geometry import Intrinsics, Patch, Pose, Similarity, sim3_exp, sim3_log
from .graph import Edge, Frame, PatchGraph

__version__ = "0.1.0"

__all__ = [
    "ba", "drift", "loop", "pipeline", "posegraph", "synthetic", "trajectory",
    "PatchSlamError", "Intrinsics", "Patch", "Pose", "Similarity",
    "sim3_exp", "sim3_log", "Edge", "Frame", "PatchGraph", "__version__",
]
