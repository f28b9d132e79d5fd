"""Similarity pose-graph optimization over keyframe nodes.

Nodes are camera-to-world similarities, initialized from current pose
estimates with scale exactly 1.  Constraints are relative similarities:
a smoothness term between consecutive keyframes and one term per detected
loop; both are held constant while the nodes move.  Residuals live in the
Sim(3) tangent space, ordered (translational, rotational, log-scale).

After optimization the graph is updated by the rescaling rule: each keyframe
pose becomes the (translation, rotation) part of its node and the inverse
depths of its patches are divided by the node scale, which leaves every
reprojection residual unchanged under a pure scale correction.

Problem import/export uses a g2o-style text grammar (exact):

    VERTEX_SIM3:QUAT <id> <tx> <ty> <tz> <qx> <qy> <qz> <qw> <s>
    EDGE_SIM3:QUAT <i> <j> <tx> <ty> <tz> <qx> <qy> <qz> <qw> <s>
    FIX <id>

An edge with j == i+1 is a smoothness constraint, anything else a loop
constraint.  Floats are written with repr precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, SingularSystem
from .geometry import (
    Pose,
    Similarity,
    sim3_exp,
    sim3_log,
    sim3_right_jacobian_inv,
)
from .graph import PatchGraph

LM_LAMBDA_INIT = 1e-4
LM_LAMBDA_GROW = 10.0
LM_LAMBDA_SHRINK = 0.5
LM_LAMBDA_MAX = 1e10


@dataclass
class PoseGraphProblem:
    nodes: list[Similarity]
    odometry: list[Similarity]                     # relative constraint per (i, i+1)
    loops: list[tuple[int, int, Similarity]]       # (j, k, measured relative)
    damping: float = LM_LAMBDA_INIT

    def __post_init__(self):
        n = len(self.nodes)
        if len(self.odometry) != n - 1:
            raise ValueError(
                f"{n} nodes need {n - 1} odometry constraints, got {len(self.odometry)}")
        for j, k, _ in self.loops:
            if not (0 <= j < n and 0 <= k < n) or j == k:
                raise ValueError(f"loop ({j}, {k}) references invalid nodes")

    @staticmethod
    def from_poses(poses: list[Pose], loops=()) -> "PoseGraphProblem":
        """Initialize nodes at scale 1 from pose estimates; odometry
        constraints are the current relative transforms."""
        nodes = [Similarity.from_pose(p) for p in poses]
        odometry = [nodes[i].inverse() * nodes[i + 1] for i in range(len(nodes) - 1)]
        return PoseGraphProblem(nodes, odometry, list(loops))


@dataclass
class PGOReport:
    iterations: int
    initial_objective: float
    final_objective: float
    max_residual_norm: float
    scale_corrections: np.ndarray
    converged: bool = False


def residual_smooth(problem: PoseGraphProblem, i: int) -> np.ndarray:
    """Smoothness residual between keyframes i and i+1."""
    return sim3_log(problem.odometry[i].inverse()
                    * problem.nodes[i].inverse() * problem.nodes[i + 1])


def residual_loop(problem: PoseGraphProblem, pair: tuple[int, int]) -> np.ndarray:
    """Loop residual for a detected pair (j, k)."""
    for j, k, delta in problem.loops:
        if (j, k) == tuple(pair):
            return sim3_log(delta * problem.nodes[j].inverse() * problem.nodes[k])
    raise KeyError(f"no loop constraint {pair}")


def _constraints(problem):
    """Unified constraint list: (a, b, constant M) with r = log(M S_a^-1 S_b)."""
    cons = [(i, i + 1, problem.odometry[i].inverse())
            for i in range(len(problem.nodes) - 1)]
    cons.extend((j, k, delta) for j, k, delta in problem.loops)
    return cons


def objective(problem: PoseGraphProblem, nodes=None) -> float:
    nodes = problem.nodes if nodes is None else nodes
    total = 0.0
    for a, b, m in _constraints(problem):
        r = sim3_log(m * nodes[a].inverse() * nodes[b])
        total += float(r @ r)
    return total


def residual_and_jacobian(m: Similarity, s_a: Similarity, s_b: Similarity):
    """Residual r = log(M S_a^-1 S_b) and its derivative w.r.t.
    left-multiplicative tangent updates of S_b; the S_a derivative is the
    negation (the update moves through the same conjugation)."""
    r = sim3_log(m * s_a.inverse() * s_b)
    j_b = sim3_right_jacobian_inv(r) @ s_b.inverse().adjoint()
    return r, j_b


def optimize(problem: PoseGraphProblem, max_iterations: int = 50,
             tolerance: float = 1e-12) -> PGOReport:
    """Levenberg-Marquardt over node tangents with node 0 held fixed."""
    n = len(problem.nodes)
    nodes = list(problem.nodes)
    cons = _constraints(problem)
    n_var = n - 1

    def var(idx):
        return idx - 1  # node 0 is the gauge

    obj = objective(problem, nodes)
    report = PGOReport(0, obj, obj, 0.0, np.ones(n))
    lam = problem.damping

    for _ in range(max_iterations):
        h = np.zeros((7 * n_var, 7 * n_var))
        g = np.zeros(7 * n_var)
        max_r = 0.0
        for a, b, m in cons:
            r, j_b = residual_and_jacobian(m, nodes[a], nodes[b])
            max_r = max(max_r, float(np.linalg.norm(r)))
            va, vb = var(a), var(b)
            if vb >= 0:
                sl_b = slice(7 * vb, 7 * vb + 7)
                h[sl_b, sl_b] += j_b.T @ j_b
                g[sl_b] += -j_b.T @ r
            if va >= 0:
                sl_a = slice(7 * va, 7 * va + 7)
                h[sl_a, sl_a] += j_b.T @ j_b
                g[sl_a] += j_b.T @ r
            if va >= 0 and vb >= 0:
                cross = -j_b.T @ j_b
                h[sl_a, sl_b] += cross
                h[sl_b, sl_a] += cross.T
        report.max_residual_norm = max_r
        grad_norm = float(np.abs(g).max(initial=0.0))

        accepted = False
        while lam <= LM_LAMBDA_MAX:
            hd = h.copy()
            idx = np.arange(7 * n_var)
            hd[idx, idx] = h[idx, idx] * (1.0 + lam) + 1e-300
            try:
                delta = np.linalg.solve(hd, g)
            except np.linalg.LinAlgError as exc:
                lam *= LM_LAMBDA_GROW
                if lam > LM_LAMBDA_MAX:
                    raise SingularSystem("pose graph normal equations stayed singular") from exc
                continue
            cand = list(nodes)
            for i in range(1, n):
                cand[i] = sim3_exp(delta[7 * var(i):7 * var(i) + 7]) * nodes[i]
            cand_obj = objective(problem, cand)
            if cand_obj <= obj * (1 + 1e-12) + 1e-300:
                nodes = cand
                obj = min(cand_obj, obj)
                lam = max(lam * LM_LAMBDA_SHRINK, 1e-12)
                accepted = True
                break
            lam *= LM_LAMBDA_GROW

        if not accepted:
            break
        report.iterations += 1
        report.final_objective = obj
        if grad_norm < tolerance:
            report.converged = True
            break

    problem.nodes = nodes
    problem.damping = lam
    report.final_objective = obj
    report.scale_corrections = np.array([s.s for s in nodes])
    report.converged = report.converged or obj < 1e-24
    return report


def apply_corrections(graph: PatchGraph, nodes: list[Similarity]) -> None:
    """Write optimized similarities back into the patch graph.

    Keyframe i (in keyframe order) takes the pose (t_i, R_i) of node i and
    its patch inverse depths are divided by the node scale.  Frames without a
    node of their own -- non-keyframes, or frames created after the worker's
    snapshot -- are rebased by composing their old pose relative to the last
    corrected keyframe with that keyframe's corrected similarity.
    """
    keyframe_ids = [f.frame_id for f in graph.frames if f.is_keyframe]
    if len(nodes) > len(keyframe_ids):
        raise ValueError(f"{len(nodes)} nodes but only {len(keyframe_ids)} keyframes")
    corrected = dict(zip(keyframe_ids, nodes))

    last: tuple[Pose, Similarity] | None = None   # (old pose, corrected node)
    for frame in graph.frames:
        fid = frame.frame_id
        old_pose = frame.pose
        node = corrected.get(fid)
        if node is not None:
            frame.pose = node.to_pose()
            scale = node.s
            last = (old_pose, node)
        elif last is not None:
            base_old, base_node = last
            rel = base_old.inverse() * old_pose
            rebased = base_node * Similarity.from_pose(rel)
            frame.pose = rebased.to_pose()
            scale = base_node.s
        else:
            continue
        if scale != 1.0:
            graph.patches[fid] = [p.with_inverse_depth(p.inverse_depth / scale)
                                  for p in graph.patches[fid]]


# ---------------------------------------------------------------------------
# g2o-style I/O.


def _fmt(x: float) -> str:
    return repr(float(x))


def _sim_fields(s: Similarity) -> str:
    vals = list(s.t) + list(s.q) + [s.s]
    return " ".join(_fmt(v) for v in vals)


def write_g2o(problem: PoseGraphProblem, path) -> None:
    with open(path, "w") as fh:
        for i, node in enumerate(problem.nodes):
            fh.write(f"VERTEX_SIM3:QUAT {i} {_sim_fields(node)}\n")
        fh.write("FIX 0\n")
        for i, delta in enumerate(problem.odometry):
            fh.write(f"EDGE_SIM3:QUAT {i} {i + 1} {_sim_fields(delta)}\n")
        for j, k, delta in problem.loops:
            fh.write(f"EDGE_SIM3:QUAT {j} {k} {_sim_fields(delta)}\n")


def _parse_sim(tok, path, ln) -> Similarity:
    try:
        vals = [float(v) for v in tok]
        return Similarity(np.array(vals[3:7]), np.array(vals[0:3]), vals[7])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"bad similarity fields: {exc}", path, ln) from exc


def read_g2o(path) -> PoseGraphProblem:
    vertices: dict[int, Similarity] = {}
    edges = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "VERTEX_SIM3:QUAT":
                vertices[int(tok[1])] = _parse_sim(tok[2:], str(path), ln)
            elif tok[0] == "EDGE_SIM3:QUAT":
                edges.append((int(tok[1]), int(tok[2]),
                              _parse_sim(tok[3:], str(path), ln)))
            elif tok[0] == "FIX":
                if int(tok[1]) != 0:
                    raise ParseError("only node 0 may be fixed", str(path), ln)
            else:
                raise ParseError(f"unknown record {tok[0]!r}", str(path), ln)
    if not vertices:
        raise ParseError("no vertices", str(path))
    n = max(vertices) + 1
    if sorted(vertices) != list(range(n)):
        raise ParseError("vertex ids must be contiguous from 0", str(path))
    nodes = [vertices[i] for i in range(n)]
    odometry: list[Similarity | None] = [None] * (n - 1)
    loops = []
    for a, b, delta in edges:
        if b == a + 1 and odometry[a] is None:
            odometry[a] = delta
        else:
            loops.append((a, b, delta))
    missing = [i for i, d in enumerate(odometry) if d is None]
    if missing:
        raise ParseError(f"missing odometry edges for pairs {missing}", str(path))
    return PoseGraphProblem(nodes, odometry, loops)
