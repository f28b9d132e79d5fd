"""Proximity loop closure over the shared patch graph.

Revisits are detected purely from camera-center distance against frames old
enough to be outside the odometry neighborhood.  Closure inserts
uni-directional edges from the stored patches of old frames into a recent
frame (so only the recent frame needs dense features), asks the flow oracle
for their targets, and runs one global bundle adjustment in which odometry
and loop factors share a single system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ba
from .errors import ConfigError
from .graph import LOOP, PatchGraph


@dataclass
class ProximityConfig:
    distance_threshold: float | None = None   # None: 2x median inter-frame spacing
    min_temporal_gap: int = 30
    max_edges_per_closure: int = 288
    backend_range: int = 1000                  # keyframe span of the global solve
    odometry_radius: int = 13                  # for the gap invariant check
    ba_iterations: int = 8
    ba_tolerance: float = 1e-9
    backend_threshold: int = ba.DEFAULT_BACKEND_THRESHOLD

    def validate(self) -> None:
        if self.min_temporal_gap <= self.odometry_radius:
            raise ConfigError(
                f"min_temporal_gap ({self.min_temporal_gap}) must exceed the "
                f"odometry connectivity radius ({self.odometry_radius})")
        if self.backend_range < 2:
            raise ConfigError("backend_range must cover at least two keyframes")
        if self.max_edges_per_closure < 1:
            raise ConfigError("max_edges_per_closure must be positive")


@dataclass
class ClosureEvent:
    anchor: int                        # recent frame receiving the loop edges
    matched: list[int]                 # old frames, closest first
    edge_indices: list[int]
    report: ba.BAReport | None = None
    active_patches: int = 0


def resolve_threshold(graph: PatchGraph, config: ProximityConfig) -> float:
    """Closure distance gate; defaults to 2x the median inter-frame spacing."""
    if config.distance_threshold is not None:
        return config.distance_threshold
    centers = graph.camera_centers()
    if len(centers) < 2:
        return 0.0
    spacing = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    return 2.0 * float(np.median(spacing))


def detect(graph: PatchGraph, config: ProximityConfig, newest: int | None = None):
    """Revisit candidates (old frame, recent frame), sorted by distance.

    A pair qualifies when the camera centers are within the threshold and the
    temporal gap is at least ``min_temporal_gap``.  ``newest`` restricts the
    recent side (the live pipeline passes its current frame).
    """
    n = graph.n_frames if newest is None else newest + 1
    if n < config.min_temporal_gap + 1:
        return []
    threshold = resolve_threshold(graph, config)
    if threshold <= 0:
        return []
    centers = graph.camera_centers()[:n]
    out = []
    for recent in range(config.min_temporal_gap, n):
        old = np.arange(0, recent - config.min_temporal_gap + 1)
        dist = np.linalg.norm(centers[old] - centers[recent], axis=1)
        hit = dist < threshold
        out.extend(zip(dist[hit], old[hit].tolist(), [recent] * int(hit.sum())))
    out.sort(key=lambda r: r[0])
    return [(int(o), int(r)) for _, o, r in out]


def close(graph: PatchGraph, candidates, flow_oracle, config: ProximityConfig) -> ClosureEvent:
    """Insert loop edges for the newest candidate frame and run global BA.

    Edges always run old -> recent so no dense features of old frames are
    revived; the optimization mixes the new loop factors with every odometry
    factor inside the backend range (older poses stay fixed).
    """
    if not candidates:
        raise ValueError("close() requires at least one candidate pair")
    config.validate()
    anchor = max(r for _, r in candidates)
    matched = [o for o, r in candidates if r == anchor]

    triples = []
    for old in matched:
        for k in range(len(graph.patches[old])):
            if len(triples) >= config.max_edges_per_closure:
                break
            triples.append((old, k, anchor))
        if len(triples) >= config.max_edges_per_closure:
            break
    edge_indices = graph.add_edges(triples, kind=LOOP)
    flow_oracle(graph, edge_indices)

    first_free = max(1, anchor - config.backend_range + 1)
    problem = ba.BAProblem(graph, (first_free, anchor))
    report = ba.solve(problem, max_iterations=config.ba_iterations,
                      tolerance=config.ba_tolerance,
                      backend_threshold=config.backend_threshold)
    return ClosureEvent(anchor, matched, edge_indices, report,
                        active_patches=problem.active_patch_count())
