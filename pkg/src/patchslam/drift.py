"""Accumulated-drift estimation between a retrieved frame pair.

The pipeline: triangulate local 3D keypoints around each side of the pair
using structure-only refinement (poses held fixed), then align the two
point clouds with RANSAC + a closed-form similarity fit.  The resulting
transform maps points expressed in the older frame's camera coordinates
into the newer frame's camera coordinates, so a drift-free pair yields the
identity up to the relative pose that the pose graph already expects.

Candidate retrieval (image retrieval + 2D matching) is injected: callers
provide a :class:`LoopCandidate` either from the synthetic provider in
``patchslam.synthetic`` or from a fixture file.

Candidate fixture format (line oriented, exact):

    # loopcandidate v1
    pair <j> <k>
    side <anchor> <nb_prev> <nb_next> <count>
    <u> <v> <u_prev> <v_prev> <u_next> <v_next>     (count rows)
    side <anchor> <nb_prev> <nb_next> <count>
    ... rows ...
    matches <count>
    <idx_j> <idx_k>                                  (count rows)

Floats use repr precision; round trips are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InsufficientParallax,
    NoConsensus,
    ParseError,
)
from .geometry import (
    Intrinsics,
    Pose,
    Similarity,
    matrix_to_quat,
    pinhole_rays,
    project_array,
)

RANSAC_ITERATIONS = 512
RANSAC_MIN_INLIERS = 12
RANSAC_SAMPLE_SIZE = 3
# inlier gate as a fraction of the target cloud's RMS radius
RANSAC_THRESHOLD_FRACTION = 0.02


@dataclass
class LoopCandidate:
    """A retrieved frame pair with 2D correspondences to temporal neighbors.

    ``kp_*`` are (n, 2) pixel arrays in the anchor frame; ``nb_*`` are
    (2, n, 2) pixel arrays giving the same keypoints in the two temporal
    neighbor frames.  ``matches`` is (M, 2) integer rows (idx_j, idx_k) into
    the two keypoint sets.
    """

    frame_j: int
    frame_k: int
    neighbors_j: tuple[int, int]
    neighbors_k: tuple[int, int]
    kp_j: np.ndarray
    nb_j: np.ndarray
    kp_k: np.ndarray
    nb_k: np.ndarray
    matches: np.ndarray

    def __post_init__(self):
        self.kp_j = np.asarray(self.kp_j, dtype=float).reshape(-1, 2)
        self.kp_k = np.asarray(self.kp_k, dtype=float).reshape(-1, 2)
        self.nb_j = np.asarray(self.nb_j, dtype=float).reshape(2, -1, 2)
        self.nb_k = np.asarray(self.nb_k, dtype=float).reshape(2, -1, 2)
        self.matches = np.asarray(self.matches, dtype=int).reshape(-1, 2)
        if len(self.kp_j) == 0 or len(self.kp_k) == 0:
            raise ValueError("loop candidate has an empty correspondence set")
        if self.frame_j >= self.frame_k:
            raise ValueError("frame_j must be the older frame")


@dataclass
class DriftEstimate:
    transform: Similarity      # maps older-frame (j) points into newer-frame (k) points
    inlier_count: int
    inlier_ratio: float
    rms_error: float


def triangulate(
    anchor_pixels: np.ndarray,
    neighbor_pixels: np.ndarray,
    poses: tuple[Pose, Pose, Pose],
    intr: Intrinsics,
    reproj_gate: float = 1.5,
    iterations: int = 30,
):
    """Structure-only refinement: per-keypoint inverse depth, poses fixed.

    anchor_pixels:   (n, 2) keypoints in the anchor frame
    neighbor_pixels: (2, n, 2) the same keypoints observed in two neighbors
    poses:           (anchor, neighbor_1, neighbor_2) world-from-camera

    Returns (points (n, 3) in the anchor camera frame, valid (n,)).  Points
    whose final reprojection RMS exceeds ``reproj_gate`` pixels, whose depth
    is non-positive, or which carry no parallax information are dropped.
    Raises InsufficientParallax when nothing survives.
    """
    anchor_pixels = np.asarray(anchor_pixels, dtype=float).reshape(-1, 2)
    neighbor_pixels = np.asarray(neighbor_pixels, dtype=float).reshape(2, -1, 2)
    n = anchor_pixels.shape[0]
    rays = pinhole_rays(anchor_pixels, intr)

    anchor, nb1, nb2 = poses
    rel = [(nb.inverse() * anchor) for nb in (nb1, nb2)]
    rots = np.stack([r.rotation_matrix() for r in rel])
    trans = np.stack([r.t for r in rel])

    def residuals(d):
        # (2, n, 2) reprojection residuals at inverse depths d (n,)
        pts = rays[None] / d[None, :, None]
        cam = np.einsum("sab,snb->sna", rots, pts) + trans[:, None, :]
        pix, valid = project_array(cam, intr)
        return pix - neighbor_pixels, valid

    # coarse grid init guards against the wrong convexity basin
    grid = np.geomspace(1e-2, 10.0, 16)
    costs = np.empty((len(grid), n))
    for gi, d0 in enumerate(grid):
        r, valid = residuals(np.full(n, d0))
        c = (r ** 2).sum(axis=-1)
        c[~valid] = np.inf
        costs[gi] = c.sum(axis=0)
    d = grid[np.argmin(costs, axis=0)].copy()

    info = np.zeros(n)
    for _ in range(iterations):
        r, valid = residuals(d)
        # scalar Gauss-Newton on inverse depth via central differences of the
        # (cheap, exact-to-roundoff) reprojection map
        h = np.maximum(1e-7, 1e-6 * d)
        rp, _ = residuals(d + h)
        rm, _ = residuals(d - h)
        jac = (rp - rm) / (2 * h)[None, :, None]
        w = valid[..., None].astype(float)
        info = (w * jac * jac).sum(axis=(0, 2))
        grad = (w * jac * r).sum(axis=(0, 2))
        step = np.where(info > 1e-12, -grad / np.maximum(info, 1e-12), 0.0)
        d = np.maximum(d + step, 1e-8)
        if np.max(np.abs(step)) < 1e-14:
            break

    r, valid = residuals(d)
    rms = np.sqrt((r ** 2).sum(axis=-1).mean(axis=0))
    good = (rms < reproj_gate) & (d > 1e-8) & valid.all(axis=0) & (info > 1e-8)
    if not good.any():
        raise InsufficientParallax("triangulation dropped every keypoint")
    points = rays / d[:, None]
    return points, good


def umeyama(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> Similarity:
    """Closed-form least-squares similarity: minimizes sum ||s R x + t - y||^2."""
    x = np.asarray(source, dtype=float).reshape(-1, 3)
    y = np.asarray(target, dtype=float).reshape(-1, 3)
    if x.shape != y.shape:
        raise ValueError(f"point sets differ in shape: {x.shape} vs {y.shape}")
    if x.shape[0] < 3:
        raise DegenerateConfiguration(f"need >= 3 point pairs, got {x.shape[0]}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = (xc ** 2).sum() / len(x)
    cov = yc.T @ xc / len(x)
    u, dvals, vt = np.linalg.svd(cov)
    if var_x < 1e-18 or dvals[1] < 1e-12 * max(dvals[0], 1e-300):
        raise DegenerateConfiguration("point set is (near) collinear or coincident")
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.ones(3)
    flip[2] = sign
    rot = u @ np.diag(flip) @ vt
    scale = float((dvals * flip).sum() / var_x) if with_scale else 1.0
    if scale <= 0:
        raise DegenerateConfiguration(f"non-positive fitted scale {scale}")
    t = my - scale * rot @ mx
    return Similarity(matrix_to_quat(rot), t, scale)


def ransac_umeyama(
    source: np.ndarray,
    target: np.ndarray,
    iterations: int = RANSAC_ITERATIONS,
    inlier_threshold: float | None = None,
    min_inliers: int = RANSAC_MIN_INLIERS,
    seed: int = 0,
) -> DriftEstimate:
    """Robust similarity between matched 3D point pairs.

    The best minimal-sample model by inlier count is refit on its full inlier
    set.  Deterministic for a fixed seed; invariant to input ordering after
    the refit as long as the inlier set is unambiguous.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    dst = np.asarray(target, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"need >= 4 pairs for consensus, got {n}")
    if inlier_threshold is None:
        radius = np.sqrt(((dst - dst.mean(axis=0)) ** 2).sum(axis=1).mean())
        inlier_threshold = RANSAC_THRESHOLD_FRACTION * max(radius, 1e-12)

    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    for _ in range(iterations):
        idx = rng.choice(n, size=RANSAC_SAMPLE_SIZE, replace=False)
        try:
            model = umeyama(src[idx], dst[idx])
        except DegenerateConfiguration:
            continue
        err = np.linalg.norm(model.act(src) - dst, axis=1)
        mask = err < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask

    if best_count < min_inliers:
        raise NoConsensus(
            f"best consensus has {best_count} inliers < required {min_inliers}")
    model = umeyama(src[best_mask], dst[best_mask])
    err = np.linalg.norm(model.act(src) - dst, axis=1)
    mask = err < inlier_threshold
    if mask.sum() >= RANSAC_SAMPLE_SIZE:
        model = umeyama(src[mask], dst[mask])
        err = np.linalg.norm(model.act(src) - dst, axis=1)
        mask = err < inlier_threshold
    rms = float(np.sqrt((err[mask] ** 2).mean())) if mask.any() else float("inf")
    return DriftEstimate(model, int(mask.sum()), float(mask.mean()), rms)


def estimate_drift(
    candidate: LoopCandidate,
    poses: list[Pose],
    intr: Intrinsics,
    reproj_gate: float = 1.5,
    seed: int = 0,
    min_inliers: int = RANSAC_MIN_INLIERS,
    inlier_threshold: float | None = None,
) -> DriftEstimate:
    """Full drift pipeline for one candidate against current pose estimates."""
    j, k = candidate.frame_j, candidate.frame_k
    pts_j, ok_j = triangulate(
        candidate.kp_j, candidate.nb_j,
        (poses[j], poses[candidate.neighbors_j[0]], poses[candidate.neighbors_j[1]]),
        intr, reproj_gate)
    pts_k, ok_k = triangulate(
        candidate.kp_k, candidate.nb_k,
        (poses[k], poses[candidate.neighbors_k[0]], poses[candidate.neighbors_k[1]]),
        intr, reproj_gate)
    mj, mk = candidate.matches[:, 0], candidate.matches[:, 1]
    keep = ok_j[mj] & ok_k[mk]
    if keep.sum() < 4:
        raise InsufficientParallax(
            f"only {int(keep.sum())} matched keypoints survived triangulation")
    return ransac_umeyama(pts_j[mj[keep]], pts_k[mk[keep]],
                          seed=seed, min_inliers=min_inliers,
                          inlier_threshold=inlier_threshold)


class ConsecutiveDetectionGate:
    """Require the same frame-region pair in consecutive keyframes before
    accepting a retrieval, trading recall for precision."""

    def __init__(self, region_width: int = 5, required: int = 2):
        self.region_width = region_width
        self.required = required
        self._streaks: dict[tuple[int, int], int] = {}
        self._last_keyframe: int | None = None

    def update(self, keyframe_index: int, pairs) -> list[tuple[int, int]]:
        """Feed this keyframe's detected (old, recent) pairs; returns the
        pairs whose region has now been seen ``required`` keyframes in a row."""
        consecutive = (self._last_keyframe is not None
                       and keyframe_index == self._last_keyframe + 1)
        self._last_keyframe = keyframe_index
        seen = {}
        for j, k in pairs:
            region = (j // self.region_width, k // self.region_width)
            streak = self._streaks.get(region, 0) + 1 if consecutive else 1
            seen[region] = max(seen.get(region, 0), streak)
        self._streaks = seen if consecutive or seen else {}
        accepted = []
        for j, k in pairs:
            region = (j // self.region_width, k // self.region_width)
            if self._streaks.get(region, 0) >= self.required:
                accepted.append((j, k))
        return accepted


# ---------------------------------------------------------------------------
# Candidate fixture I/O.


def _fmt(x: float) -> str:
    return repr(float(x))


def write_candidate(candidate: LoopCandidate, path) -> None:
    with open(path, "w") as fh:
        fh.write("# loopcandidate v1\n")
        fh.write(f"pair {candidate.frame_j} {candidate.frame_k}\n")
        for anchor, nbs, kp, nb in (
            (candidate.frame_j, candidate.neighbors_j, candidate.kp_j, candidate.nb_j),
            (candidate.frame_k, candidate.neighbors_k, candidate.kp_k, candidate.nb_k),
        ):
            fh.write(f"side {anchor} {nbs[0]} {nbs[1]} {len(kp)}\n")
            for i in range(len(kp)):
                row = [kp[i, 0], kp[i, 1], nb[0, i, 0], nb[0, i, 1], nb[1, i, 0], nb[1, i, 1]]
                fh.write(" ".join(_fmt(v) for v in row) + "\n")
        fh.write(f"matches {len(candidate.matches)}\n")
        for a, b in candidate.matches:
            fh.write(f"{a} {b}\n")


def read_candidate(path) -> LoopCandidate:
    with open(path) as fh:
        lines = [(i, ln.strip()) for i, ln in enumerate(fh, start=1)]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of candidate file", str(path))
        pos += 1
        return lines[pos - 1]

    ln, row = take()
    tok = row.split()
    if tok[0] != "pair" or len(tok) != 3:
        raise ParseError("expected 'pair <j> <k>'", str(path), ln)
    frame_j, frame_k = int(tok[1]), int(tok[2])

    sides = []
    for _ in range(2):
        ln, row = take()
        tok = row.split()
        if tok[0] != "side" or len(tok) != 5:
            raise ParseError("expected 'side <anchor> <nb> <nb> <count>'", str(path), ln)
        anchor, nb1, nb2, count = (int(v) for v in tok[1:])
        kp = np.empty((count, 2))
        nb = np.empty((2, count, 2))
        for r in range(count):
            ln, row = take()
            try:
                vals = [float(v) for v in row.split()]
                kp[r] = vals[0:2]
                nb[0, r] = vals[2:4]
                nb[1, r] = vals[4:6]
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad keypoint row: {exc}", str(path), ln) from exc
        sides.append((anchor, (nb1, nb2), kp, nb))

    ln, row = take()
    tok = row.split()
    if tok[0] != "matches" or len(tok) != 2:
        raise ParseError("expected 'matches <count>'", str(path), ln)
    m = int(tok[1])
    matches = np.empty((m, 2), dtype=int)
    for r in range(m):
        ln, row = take()
        try:
            matches[r] = [int(v) for v in row.split()]
        except ValueError as exc:
            raise ParseError(f"bad match row: {exc}", str(path), ln) from exc

    (aj, nbj, kpj, nbpj), (ak, nbk, kpk, nbpk) = sides
    if aj != frame_j or ak != frame_k:
        raise ParseError("side anchors disagree with the pair record", str(path))
    return LoopCandidate(frame_j, frame_k, nbj, nbk, kpj, nbpj, kpk, nbpk, matches)
