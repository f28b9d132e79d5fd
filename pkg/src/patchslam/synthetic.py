"""Synthetic world and flow oracle standing in for a learned frontend.

Generates trajectories, landmarks and patch observations with known ground
truth, fills edge flow targets with configurable noise/outliers, and fabricates
retrieval candidates from ground-truth covisibility.  Every downstream module
is tested against the values this module can reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drift import LoopCandidate
from .errors import InfeasibleVisibility, ParseError
from .geometry import (
    DEFAULT_PATCH_SIZE,
    Intrinsics,
    Patch,
    Pose,
    matrix_to_quat,
    project_array,
    reproject_grid,
)
from .graph import PatchGraph, parse_graph_lines, write_graph

DEFAULT_INTRINSICS = Intrinsics(320.0, 320.0, 256.0, 192.0)
DEFAULT_IMAGE_SIZE = (512, 384)

TRAJECTORY_KINDS = ("line", "circle", "square-loop", "random-walk-with-revisit")


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "circle"
    n_frames: int = 50
    seed: int = 0
    n_landmarks: int = 4000
    extent: float = 10.0            # circle diameter / square side / path length
    frame_dt: float = 0.1
    shell: tuple[float, float] = (1.0, 20.0)   # landmark distance band
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    intrinsics: Intrinsics = field(default_factory=lambda: DEFAULT_INTRINSICS)
    overshoot: float = 0.15         # loop kinds travel past the start by this fraction
    look: str = "forward"           # "forward" along the path, or "inward" at its centroid

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.look not in ("forward", "inward"):
            raise ValueError(f"unknown look mode {self.look!r}")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    gt_poses: list[Pose]
    landmarks: np.ndarray          # (L, 3) world points
    intrinsics: Intrinsics

    def gt_camera_points(self, frame_id: int, landmark_ids) -> np.ndarray:
        """Landmarks expressed in the ground-truth camera frame of ``frame_id``."""
        return self.gt_poses[frame_id].inverse().act(self.landmarks[landmark_ids])

    def visible_landmarks(self, frame_id: int, margin: float = 2.0) -> np.ndarray:
        """Indices of landmarks inside the image with safe depth for this frame."""
        cam = self.gt_poses[frame_id].inverse().act(self.landmarks)
        pix, valid = project_array(cam, self.intrinsics)
        w, h = self.spec.image_size
        ok = (
            valid
            & (cam[:, 2] > 0.5)
            & (pix[:, 0] >= margin) & (pix[:, 0] <= w - 1 - margin)
            & (pix[:, 1] >= margin) & (pix[:, 1] <= h - 1 - margin)
        )
        return np.nonzero(ok)[0]


@dataclass(frozen=True)
class OracleConfig:
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 40.0
    low_confidence: float = 0.05    # confidence assigned to outlier edges

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Trajectories.


def _look_rotation(forward: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with the optical axis along ``forward``."""
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    if abs(f @ up) > 0.99:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def _positions(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_frames
    if spec.kind == "line":
        s = np.linspace(0.0, spec.extent, n)
        return np.stack([s, np.zeros(n), np.zeros(n)], axis=1)
    if spec.kind == "circle":
        radius = spec.extent / 2.0
        ang = np.linspace(0.0, 2 * np.pi * (1 + spec.overshoot), n)
        return np.stack([radius * np.cos(ang), np.zeros(n), radius * np.sin(ang)], axis=1)
    if spec.kind == "square-loop":
        side = spec.extent
        total = 4.0 * side * (1 + spec.overshoot)
        s = np.linspace(0.0, total, n) % (4.0 * side)
        pos = np.zeros((n, 3))
        for i, d in enumerate(s):
            leg, rem = int(d // side) % 4, d % side
            if leg == 0:
                pos[i] = (rem, 0.0, 0.0)
            elif leg == 1:
                pos[i] = (side, 0.0, rem)
            elif leg == 2:
                pos[i] = (side - rem, 0.0, side)
            else:
                pos[i] = (0.0, 0.0, side - rem)
        return pos
    # random walk that bends back to the start for the final stretch
    step = spec.extent / max(n - 1, 1)
    heading = rng.uniform(0, 2 * np.pi)
    pos = [np.zeros(3)]
    n_out = max(int(0.7 * n), 1)
    for _ in range(n_out - 1):
        heading += rng.normal(0.0, 0.25)
        pos.append(pos[-1] + step * np.array([np.cos(heading), 0.0, np.sin(heading)]))
    far = pos[-1]
    for i in range(n - n_out):
        a = (i + 1) / max(n - n_out, 1)
        pos.append((1 - a) * far)
    return np.stack(pos[:n])


def _gt_poses(spec: SceneSpec, rng: np.random.Generator) -> list[Pose]:
    pos = _positions(spec, rng)
    centroid = pos.mean(axis=0)
    poses = []
    for i in range(len(pos)):
        if spec.look == "inward":
            forward = centroid - pos[i]
        else:
            a, b = max(0, i - 1), min(len(pos) - 1, i + 1)
            forward = pos[b] - pos[a]
        if np.linalg.norm(forward) < 1e-12:
            forward = np.array([1.0, 0.0, 0.0])
        poses.append(Pose(matrix_to_quat(_look_rotation(forward)), pos[i]))
    return poses


def _sample_landmarks(spec: SceneSpec, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.shell
    anchor = pos[rng.integers(0, len(pos), size=spec.n_landmarks)]
    direction = rng.normal(size=(spec.n_landmarks, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(lo, hi, size=spec.n_landmarks)
    return anchor + direction * radius[:, None]


# ---------------------------------------------------------------------------
# Scene + graph generation.


def generate(
    spec: SceneSpec,
    patches_per_frame: int = 96,
    odometry_radius: int = 13,
    patch_size: int = DEFAULT_PATCH_SIZE,
):
    """Build a ground-truth scene and a patch graph initialized at the truth.

    Per frame, ``patches_per_frame`` visible landmarks are chosen uniformly at
    random (seeded); each becomes a patch centered on its projection carrying
    the true inverse depth and its landmark id.  Odometry edges connect each
    new frame bidirectionally to the previous ``odometry_radius`` frames.
    """
    rng = np.random.default_rng(spec.seed)
    gt_poses = _gt_poses(spec, rng)
    landmarks = _sample_landmarks(spec, np.stack([p.t for p in gt_poses]), rng)
    scene = SyntheticScene(spec, gt_poses, landmarks, spec.intrinsics)

    graph = PatchGraph(spec.intrinsics, patch_size)
    margin = (patch_size - 1) / 2.0 + 0.5
    for fid in range(spec.n_frames):
        visible = scene.visible_landmarks(fid, margin)
        if len(visible) < patches_per_frame:
            raise InfeasibleVisibility(
                f"frame {fid} sees {len(visible)} landmarks < {patches_per_frame};"
                " increase n_landmarks or shrink the shell")
        chosen = rng.choice(visible, size=patches_per_frame, replace=False)
        cam = scene.gt_camera_points(fid, chosen)
        pix, _ = project_array(cam, spec.intrinsics)
        patches = [
            Patch.square(fid, pix[i], 1.0 / cam[i, 2], patch_size, landmark_id=int(chosen[i]))
            for i in range(patches_per_frame)
        ]
        graph.add_frame(gt_poses[fid], fid * spec.frame_dt, patches)
        if odometry_radius > 0:
            graph.connect_frame(fid, odometry_radius)
    return scene, graph


# ---------------------------------------------------------------------------
# Flow oracle.


def fill_flow(
    graph: PatchGraph,
    scene: SyntheticScene,
    config: OracleConfig = OracleConfig(),
    edge_indices=None,
    seed: int = 0,
) -> None:
    """Write flow targets and confidences for the selected edges.

    The target is the ground-truth reprojection of the patch grid (ground
    truth poses and depth), shifted by one Gaussian 2-vector per edge of the
    configured sigma.  A seeded fraction of edges becomes gross outliers with
    ``low_confidence``; everything else gets confidence (1, 1).  Edges whose
    true reprojection is unobservable from the target frame (behind it or far
    outside the image) get confidence (0, 0): a frontend cannot measure flow
    it cannot see.
    """
    if edge_indices is None:
        edge_indices = range(len(graph.edges))
    edge_indices = list(edge_indices)
    if not edge_indices:
        return
    rng = np.random.default_rng(seed)
    intr = graph.intrinsics

    edges = [graph.edges[i] for i in edge_indices]
    rays = np.stack([graph.patch_rays(e.src_frame, e.src_patch) for e in edges])
    lm_ids = np.array([graph.patch(e.src_frame, e.src_patch).landmark_id for e in edges])
    src = np.array([e.src_frame for e in edges])
    dst = np.array([e.dst_frame for e in edges])

    gt_q = np.stack([p.q for p in scene.gt_poses])
    gt_t = np.stack([p.t for p in scene.gt_poses])
    from .geometry import quat_to_matrix  # local alias to keep the hot path tight

    rot = quat_to_matrix(gt_q)
    # true shared inverse depth of each patch in its source frame
    cam_z = np.einsum("eb,eb->e",
                      rot[src][:, :, 2],
                      scene.landmarks[lm_ids] - gt_t[src])
    gt_d = 1.0 / cam_z
    pix, valid = reproject_grid(rays, gt_d, rot[src], gt_t[src], rot[dst], gt_t[dst], intr)
    w, h = scene.spec.image_size
    slack = 0.25 * max(w, h)
    observable = (
        valid.all(axis=1)
        & (pix[..., 0] > -slack).all(axis=1) & (pix[..., 0] < w + slack).all(axis=1)
        & (pix[..., 1] > -slack).all(axis=1) & (pix[..., 1] < h + slack).all(axis=1)
    )

    shift = rng.normal(0.0, config.pixel_noise_sigma, size=(len(edges), 2)) \
        if config.pixel_noise_sigma > 0 else np.zeros((len(edges), 2))
    outlier = rng.random(len(edges)) < config.outlier_fraction
    ang = rng.uniform(0, 2 * np.pi, size=len(edges))
    gross = config.outlier_magnitude * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    for row, e in enumerate(edges):
        target = pix[row] + shift[row]
        if not observable[row]:
            e.confidence = np.zeros(2)
        elif outlier[row]:
            target = target + gross[row]
            e.confidence = np.full(2, config.low_confidence)
        else:
            e.confidence = np.ones(2)
        e.target = target


def make_flow_oracle(scene: SyntheticScene, config: OracleConfig, seed: int = 0):
    """Stateful oracle callable ``(graph, edge_indices) -> None`` for closure
    edge updates; successive calls consume one deterministic seed each."""
    counter = {"n": 0}

    def oracle(graph: PatchGraph, edge_indices) -> None:
        fill_flow(graph, scene, config, edge_indices,
                  seed=(seed * 100003 + counter["n"]))
        counter["n"] += 1

    return oracle


# ---------------------------------------------------------------------------
# Retrieval stand-in for the classical loop-closure path.


def covisible_pairs(scene: SyntheticScene, min_common: int = 40,
                    min_gap: int = 20) -> list[tuple[int, int]]:
    """Frame pairs sharing at least ``min_common`` visible landmarks."""
    vis = [set(scene.visible_landmarks(f)) for f in range(scene.spec.n_frames)]
    pairs = []
    for k in range(scene.spec.n_frames):
        for j in range(0, k - min_gap):
            if len(vis[j] & vis[k]) >= min_common:
                pairs.append((j, k))
    return pairs


def _temporal_neighbors(anchor: int, newest: int) -> tuple[int, int]:
    """Two distinct neighbor frames of the anchor, never beyond ``newest``."""
    if 0 <= anchor - 1 and anchor + 1 <= newest:
        return anchor - 1, anchor + 1
    if anchor - 2 >= 0:
        return anchor - 2, anchor - 1
    return anchor + 1, anchor + 2


def synthetic_loop_candidate(
    scene: SyntheticScene,
    frame_j: int,
    frame_k: int,
    max_points: int = 120,
    pixel_noise: float = 0.0,
    outlier_fraction: float = 0.0,
    seed: int = 0,
    newest: int | None = None,
) -> LoopCandidate:
    """Fabricate retrieval output for a pair: keypoints from common landmarks
    projected into each anchor and its two temporal neighbors, plus cross
    matches with an optional planted-outlier fraction (scrambled rows).

    ``newest`` caps the neighbor frames (a live pipeline has no estimates for
    frames it has not processed yet).
    """
    rng = np.random.default_rng(seed)
    n = scene.spec.n_frames
    newest = n - 1 if newest is None else newest
    if newest < 2:
        raise ValueError("need at least three processed frames for triangulation")
    nbs_j = _temporal_neighbors(frame_j, newest)
    nbs_k = _temporal_neighbors(frame_k, newest)

    def side_visible(anchor, nbs):
        ids = set(scene.visible_landmarks(anchor))
        for nb in nbs:
            ids &= set(scene.visible_landmarks(nb))
        return ids

    common = sorted(side_visible(frame_j, nbs_j) & side_visible(frame_k, nbs_k))
    if len(common) < 8:
        raise InfeasibleVisibility(
            f"frames {frame_j} and {frame_k} share only {len(common)} landmarks")
    if len(common) > max_points:
        common = sorted(rng.choice(common, size=max_points, replace=False))
    ids = np.array(common)

    def observe(anchor, nbs):
        kp, _ = project_array(scene.gt_camera_points(anchor, ids), scene.intrinsics)
        nb = np.stack([
            project_array(scene.gt_camera_points(f, ids), scene.intrinsics)[0]
            for f in nbs
        ])
        if pixel_noise > 0:
            kp = kp + rng.normal(0, pixel_noise, kp.shape)
            nb = nb + rng.normal(0, pixel_noise, nb.shape)
        return kp, nb

    kp_j, nb_j = observe(frame_j, nbs_j)
    kp_k, nb_k = observe(frame_k, nbs_k)
    matches = np.stack([np.arange(len(ids)), np.arange(len(ids))], axis=1)
    n_bad = int(round(outlier_fraction * len(ids)))
    if n_bad:
        rows = rng.choice(len(ids), size=n_bad, replace=False)
        matches[rows, 1] = (matches[rows, 1] + rng.integers(1, len(ids), size=n_bad)) % len(ids)
    return LoopCandidate(frame_j, frame_k, nbs_j, nbs_k, kp_j, nb_j, kp_k, nb_k, matches)


# ---------------------------------------------------------------------------
# Scene fixtures: the patch-graph format plus landmark/gtpose/scenemeta records.


def write_scene(scene: SyntheticScene, graph: PatchGraph, path) -> None:
    spec = scene.spec
    extra = [
        f"scenemeta kind {spec.kind} n_frames {spec.n_frames} seed {spec.seed} "
        f"n_landmarks {spec.n_landmarks} extent {float(spec.extent)!r} "
        f"width {spec.image_size[0]} height {spec.image_size[1]}"
    ]
    for i, lm in enumerate(scene.landmarks):
        extra.append(f"landmark {i} {float(lm[0])!r} {float(lm[1])!r} {float(lm[2])!r}")
    for fid, pose in enumerate(scene.gt_poses):
        extra.append("gtpose " + str(fid) + " "
                     + " ".join(repr(float(v)) for v in pose.as_array()))
    write_graph(graph, path, extra)


def read_scene(path):
    """Load a scene fixture; returns (SyntheticScene, PatchGraph)."""
    with open(path) as fh:
        graph, extras = parse_graph_lines(fh, str(path))
    meta = None
    landmarks = {}
    gtposes = {}
    for ln, tok in extras:
        try:
            if tok[0] == "scenemeta":
                meta = {tok[i]: tok[i + 1] for i in range(1, len(tok) - 1, 2)}
            elif tok[0] == "landmark":
                landmarks[int(tok[1])] = [float(v) for v in tok[2:5]]
            elif tok[0] == "gtpose":
                gtposes[int(tok[1])] = Pose.from_array([float(v) for v in tok[2:9]])
            else:
                raise ParseError(f"unknown record {tok[0]!r}", str(path), ln)
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad {tok[0]!r} record: {exc}", str(path), ln) from exc
    if meta is None:
        raise ParseError("missing scenemeta record", str(path))
    spec = SceneSpec(
        kind=meta["kind"],
        n_frames=int(meta["n_frames"]),
        seed=int(meta["seed"]),
        n_landmarks=int(meta["n_landmarks"]),
        extent=float(meta["extent"]),
        image_size=(int(meta["width"]), int(meta["height"])),
        intrinsics=graph.intrinsics,
    )
    lm = np.array([landmarks[i] for i in sorted(landmarks)])
    poses = [gtposes[i] for i in sorted(gtposes)]
    if len(poses) != graph.n_frames:
        raise ParseError("gtpose records do not cover every frame", str(path))
    return SyntheticScene(spec, poses, lm, graph.intrinsics), graph
