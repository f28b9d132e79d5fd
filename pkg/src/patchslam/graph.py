"""Bipartite scene representation: frames, patches, and directed patch->frame edges.

Edges run from a (source frame, patch index) pair to a target frame and carry
the flow target grid plus a 2-vector confidence.  Direction only decides which
frame must keep its dense feature map resident; the reprojection factor
constrains both poses either way, which is what makes :meth:`PatchGraph.flip_edge`
legal.

Serialization is a line-oriented text format, one record per line:

    # patchgraph v1
    meta patch_size <p>
    intrinsics <fx> <fy> <cx> <cy>
    frame <id> <timestamp> <keyframe 0|1> <features 0|1> <tx> <ty> <tz> <qx> <qy> <qz> <qw>
    patch <frame> <index> <inverse_depth> <landmark|-1> <x0> <y0> ... (p*p pixel pairs, row-major)
    edge <src_frame> <src_patch> <dst_frame> <odometry|loop> <wx> <wy> <tx0> <ty0> ... (p*p target pairs)

Scene fixtures append ``landmark <id> <x> <y> <z>`` records (see synthetic.py).
Floats are written with repr precision, so round trips are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentFrameId, IndexOutOfRange, NoCounterpartPatch, ParseError
from .geometry import (
    DEFAULT_PATCH_SIZE,
    Intrinsics,
    Patch,
    Pose,
    pinhole_rays,
    quat_to_matrix,
    reproject_grid,
    reproject_patch,
)

ODOMETRY = "odometry"
LOOP = "loop"


@dataclass
class Frame:
    frame_id: int
    pose: Pose
    timestamp: float
    patch_count: int = 0
    is_keyframe: bool = True
    has_dense_features: bool = True


@dataclass
class Edge:
    src_frame: int
    src_patch: int
    dst_frame: int
    target: np.ndarray          # (p*p, 2) flow target pixels, constant during BA
    confidence: np.ndarray      # (2,) per-component weight in [0, 1]
    kind: str = ODOMETRY

    def __post_init__(self):
        self.target = np.array(self.target, dtype=float).reshape(-1, 2)
        self.confidence = np.array(self.confidence, dtype=float).reshape(2)
        if self.kind not in (ODOMETRY, LOOP):
            raise ValueError(f"unknown edge kind {self.kind!r}")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.kind == LOOP and self.src_frame == self.dst_frame:
            raise ValueError("loop edges must connect distinct frames")


@dataclass
class FeatureBudgetReport:
    """Which frames released dense-feature storage, and what stays resident."""

    released: list[int]
    resident: int


class PatchGraph:
    """Single-writer container for frames, patches, and edges."""

    def __init__(self, intrinsics: Intrinsics, patch_size: int = DEFAULT_PATCH_SIZE):
        self.intrinsics = intrinsics
        self.patch_size = patch_size
        self.frames: list[Frame] = []
        self.patches: list[list[Patch]] = []
        self.edges: list[Edge] = []
        self._ray_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- basic accessors ---------------------------------------------------

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_patches(self) -> int:
        return sum(len(p) for p in self.patches)

    def patch(self, frame_id: int, index: int) -> Patch:
        return self.patches[frame_id][index]

    def patch_rays(self, frame_id: int, index: int) -> np.ndarray:
        """Cached unit-depth rays of a patch grid (grids are immutable)."""
        key = (frame_id, index)
        rays = self._ray_cache.get(key)
        if rays is None:
            rays = pinhole_rays(self.patches[frame_id][index].grid, self.intrinsics)
            rays.flags.writeable = False
            self._ray_cache[key] = rays
        return rays

    def camera_centers(self) -> np.ndarray:
        """(N, 3) world positions of the cameras (translation of world-from-camera)."""
        if not self.frames:
            return np.zeros((0, 3))
        return np.stack([f.pose.t for f in self.frames])

    # -- mutations ----------------------------------------------------------

    def add_frame(self, pose_init: Pose, timestamp: float, patches: list[Patch],
                  is_keyframe: bool = True) -> int:
        frame_id = len(self.frames)
        for p in patches:
            if p.frame_id != frame_id:
                raise InconsistentFrameId(
                    f"patch carries frame id {p.frame_id}, expected {frame_id}")
            if p.size != self.patch_size:
                raise ValueError(f"patch size {p.size} != graph patch size {self.patch_size}")
        self.frames.append(Frame(frame_id, pose_init, timestamp,
                                 patch_count=len(patches), is_keyframe=is_keyframe))
        self.patches.append(list(patches))
        return frame_id

    def _check_edge_indices(self, i: int, k: int, j: int) -> None:
        if not (0 <= i < len(self.frames) and 0 <= j < len(self.frames)):
            raise IndexOutOfRange(f"edge ({i},{k},{j}) references a nonexistent frame")
        if not 0 <= k < len(self.patches[i]):
            raise IndexOutOfRange(f"edge ({i},{k},{j}) references a nonexistent patch")

    def add_edges(self, triples, kind: str = ODOMETRY) -> list[int]:
        """Append edges (i, k, j); targets start at the current reprojection
        with confidence (1, 1) and are overwritten by the flow oracle."""
        triples = list(triples)
        if not triples:
            return []
        for i, k, j in triples:
            self._check_edge_indices(i, k, j)
        rays = np.stack([self.patch_rays(i, k) for i, k, _ in triples])
        depths = np.array([self.patch(i, k).inverse_depth for i, k, _ in triples])
        qs = np.stack([f.pose.q for f in self.frames])
        ts = np.stack([f.pose.t for f in self.frames])
        rots = quat_to_matrix(qs)
        src = np.array([i for i, _, _ in triples])
        dst = np.array([j for _, _, j in triples])
        pix, _ = reproject_grid(rays, depths, rots[src], ts[src], rots[dst], ts[dst],
                                self.intrinsics)
        added = []
        for row, (i, k, j) in enumerate(triples):
            self.edges.append(Edge(i, k, j, pix[row], np.ones(2), kind))
            added.append(len(self.edges) - 1)
        return added

    def connect_frame(self, frame_id: int, radius: int) -> list[int]:
        """Local odometry connectivity for a newly added frame: its patches
        point back at the previous ``radius`` frames, and each of those frames'
        patches gains a forward edge into the new frame."""
        lo = max(0, frame_id - radius)
        triples = []
        for j in range(lo, frame_id):
            triples.extend((frame_id, k, j) for k in range(len(self.patches[frame_id])))
            triples.extend((j, k, frame_id) for k in range(len(self.patches[j])))
        return self.add_edges(triples, ODOMETRY)

    def find_counterpart(self, frame_id: int, landmark_id: int | None) -> int | None:
        if landmark_id is None:
            return None
        for idx, p in enumerate(self.patches[frame_id]):
            if p.landmark_id == landmark_id:
                return idx
        return None

    def flip_edge(self, edge_index: int) -> None:
        """Replace edge (i, k, j) by its reverse (j, k', i), where k' is the
        co-visible counterpart patch in frame j.  The target grid is
        recomputed for the new direction; confidence carries over."""
        if not 0 <= edge_index < len(self.edges):
            raise IndexOutOfRange(f"no edge {edge_index}")
        e = self.edges[edge_index]
        k2 = self.find_counterpart(e.dst_frame, self.patch(e.src_frame, e.src_patch).landmark_id)
        if k2 is None:
            raise NoCounterpartPatch(
                f"frame {e.dst_frame} has no patch co-visible with "
                f"({e.src_frame},{e.src_patch})")
        pix, _ = reproject_patch(self.patch(e.dst_frame, k2), self.frames[e.dst_frame].pose,
                                 self.frames[e.src_frame].pose, self.intrinsics)
        self.edges[edge_index] = Edge(e.dst_frame, k2, e.src_frame, pix,
                                      e.confidence.copy(), e.kind)

    def remove_frames_before(self, frame_id: int) -> FeatureBudgetReport:
        """Release dense-feature storage for frames older than ``frame_id``.

        Poses and patch features are kept forever (they back loop closure);
        only the abstract dense-feature budget is affected.  Edges are never
        dangled: no frame or patch record is deleted.
        """
        if self.frames and frame_id > self.frames[-1].frame_id + 1:
            raise IndexOutOfRange(f"frame {frame_id} is beyond the newest frame")
        released = []
        for f in self.frames:
            if f.frame_id < frame_id and f.has_dense_features:
                f.has_dense_features = False
                released.append(f.frame_id)
        return FeatureBudgetReport(released, self.dense_feature_budget())

    # -- memory model --------------------------------------------------------

    def dense_feature_budget(self) -> int:
        """Number of frames currently holding a dense feature map."""
        return sum(1 for f in self.frames if f.has_dense_features)

    def dense_feature_requirement(self) -> set[int]:
        """Frames whose dense features the current edge set would consult
        (every edge reads features of its destination frame only)."""
        return {e.dst_frame for e in self.edges}

    # -- bookkeeping / invariants ---------------------------------------------

    def active_patch_keys(self, edge_indices, confidence_gate: float = 0.5) -> set[tuple[int, int]]:
        """Patches with at least one outgoing edge (among ``edge_indices``)
        whose max confidence exceeds the gate.  Reporting only; the gate never
        filters the optimization."""
        keys = set()
        for idx in edge_indices:
            e = self.edges[idx]
            if e.confidence.max() > confidence_gate:
                keys.add((e.src_frame, e.src_patch))
        return keys

    def check_invariants(self) -> None:
        for fid, f in enumerate(self.frames):
            assert f.frame_id == fid
            assert f.patch_count == len(self.patches[fid])
            for p in self.patches[fid]:
                assert p.frame_id == fid
                assert p.inverse_depth > 0
        for e in self.edges:
            assert 0 <= e.src_frame < len(self.frames)
            assert 0 <= e.dst_frame < len(self.frames)
            assert 0 <= e.src_patch < len(self.patches[e.src_frame])
            assert e.confidence.min() >= 0 and e.confidence.max() <= 1

    def snapshot_poses(self) -> list[Pose]:
        return [f.pose for f in self.frames]


# ---------------------------------------------------------------------------
# Text fixture I/O.


def _fmt(x: float) -> str:
    return repr(float(x))


def graph_to_lines(graph: PatchGraph) -> list[str]:
    lines = ["# patchgraph v1", f"meta patch_size {graph.patch_size}"]
    k = graph.intrinsics
    lines.append("intrinsics " + " ".join(_fmt(v) for v in (k.fx, k.fy, k.cx, k.cy)))
    for f in graph.frames:
        arr = f.pose.as_array()
        lines.append(
            f"frame {f.frame_id} {_fmt(f.timestamp)} {int(f.is_keyframe)} "
            f"{int(f.has_dense_features)} " + " ".join(_fmt(v) for v in arr))
    for fid, plist in enumerate(graph.patches):
        for idx, p in enumerate(plist):
            lm = -1 if p.landmark_id is None else p.landmark_id
            lines.append(
                f"patch {fid} {idx} {_fmt(p.inverse_depth)} {lm} "
                + " ".join(_fmt(v) for v in p.grid.ravel()))
    for e in graph.edges:
        lines.append(
            f"edge {e.src_frame} {e.src_patch} {e.dst_frame} {e.kind} "
            + " ".join(_fmt(v) for v in e.confidence)
            + " " + " ".join(_fmt(v) for v in e.target.ravel()))
    return lines


def write_graph(graph: PatchGraph, path, extra_lines=()) -> None:
    with open(path, "w") as fh:
        for line in graph_to_lines(graph):
            fh.write(line + "\n")
        for line in extra_lines:
            fh.write(line + "\n")


def parse_graph_lines(lines, path: str | None = None):
    """Parse fixture lines into (PatchGraph, unparsed extra records)."""
    intr = None
    patch_size = DEFAULT_PATCH_SIZE
    frames = []
    patch_rows = []
    edge_rows = []
    extras = []
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "meta" and tok[1] == "patch_size":
                patch_size = int(tok[2])
            elif tok[0] == "intrinsics":
                intr = Intrinsics(*(float(v) for v in tok[1:5]))
            elif tok[0] == "frame":
                vals = [float(v) for v in tok[5:12]]
                frames.append((int(tok[1]), float(tok[2]), bool(int(tok[3])),
                               bool(int(tok[4])), Pose.from_array(vals)))
            elif tok[0] == "patch":
                lm = int(tok[4])
                grid = np.array([float(v) for v in tok[5:]]).reshape(-1, 2)
                patch_rows.append((int(tok[1]), int(tok[2]), float(tok[3]),
                                   None if lm < 0 else lm, grid))
            elif tok[0] == "edge":
                conf = np.array([float(tok[5]), float(tok[6])])
                target = np.array([float(v) for v in tok[7:]]).reshape(-1, 2)
                edge_rows.append((int(tok[1]), int(tok[2]), int(tok[3]), tok[4], conf, target))
            else:
                extras.append((ln, tok))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad {tok[0]!r} record: {exc}", path, ln) from exc
    if intr is None:
        raise ParseError("missing intrinsics record", path)

    graph = PatchGraph(intr, patch_size)
    frames.sort(key=lambda r: r[0])
    per_frame_patches: dict[int, list] = {fid: [] for fid, *_ in frames}
    for fid, idx, d, lm, grid in patch_rows:
        per_frame_patches[fid].append((idx, Patch(fid, grid, d, lm)))
    for fid, ts, kf, feat, pose in frames:
        plist = [p for _, p in sorted(per_frame_patches[fid])]
        got = graph.add_frame(pose, ts, plist, is_keyframe=kf)
        if got != fid:
            raise ParseError(f"non-contiguous frame ids near frame {fid}", path)
        graph.frames[fid].has_dense_features = feat
    for i, k, j, kind, conf, target in edge_rows:
        graph._check_edge_indices(i, k, j)
        graph.edges.append(Edge(i, k, j, target, conf, kind))
    return graph, extras


def read_graph(path):
    with open(path) as fh:
        graph, _ = parse_graph_lines(fh, str(path))
    return graph
