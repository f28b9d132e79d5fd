"""Confidence-weighted bundle adjustment over the patch graph.

Minimizes the weighted reprojection error of every edge against its flow
target, jointly over camera poses (6-dof tangent updates, left-multiplicative)
and patch inverse depths (1-dof each).  Depths are eliminated first through
the Schur complement; the reduced camera system is factorized either densely
or with the sparse block Cholesky, selected by problem size.

Damping is multiplicative on the diagonal, which keeps the lambda retries
cheap: the Schur contribution scales exactly by 1/(1+lambda), so one
assembly serves every damping value of that iteration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .block_cholesky import block_cholesky
from .errors import SingularSystem
from .geometry import (
    INVERSE_DEPTH_FLOOR,
    Pose,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    reproject_grid,
    rotvec_to_quat,
)
from .graph import PatchGraph

DENSE = "dense"
BLOCK_SPARSE = "block-sparse"
DEFAULT_BACKEND_THRESHOLD = 48

LM_LAMBDA_INIT = 1e-4
LM_LAMBDA_GROW = 10.0
LM_LAMBDA_SHRINK = 0.5
LM_LAMBDA_MAX = 1e10
LM_MAX_ESCALATIONS = 12

_CHUNK = 32768
_ACTIVE_EPS = 1e-12


class BAProblem:
    """A bundle adjustment problem over a contiguous free-pose range.

    Poses outside [first_free, last_free] are held fixed (gauge).  The
    problem contains every edge touching a free pose; the depths of all
    patches with at least one such edge are free.  When the edges touch at
    most one fixed pose the problem is scale-degenerate (monocular gauge)
    and the translation scale of the first free pose gets pinned.
    """

    def __init__(self, graph: PatchGraph, free_range: tuple[int, int],
                 damping: float = LM_LAMBDA_INIT, edge_indices=None):
        first, last = free_range
        if not (0 <= first <= last < graph.n_frames):
            raise ValueError(f"free range {free_range} out of bounds")
        if first == 0 and last == graph.n_frames - 1:
            raise ValueError("at least one pose must stay fixed to anchor the gauge")
        self.graph = graph
        self.first_free = first
        self.last_free = last
        self.damping = damping

        if edge_indices is None:
            edge_indices = [
                idx for idx, e in enumerate(graph.edges)
                if first <= e.src_frame <= last or first <= e.dst_frame <= last
            ]
        self.edge_indices = list(edge_indices)

        # free depth variables: patches with >= 1 edge in the problem
        keys = sorted({(graph.edges[i].src_frame, graph.edges[i].src_patch)
                       for i in self.edge_indices})
        self.depth_keys = keys
        self._depth_row = {k: r for r, k in enumerate(keys)}

        self.free_frames = list(range(first, last + 1))
        self._var_of = np.full(graph.n_frames, -1, dtype=int)
        self._var_of[first:last + 1] = np.arange(len(self.free_frames))

        touched_fixed = {
            f for i in self.edge_indices
            for f in (graph.edges[i].src_frame, graph.edges[i].dst_frame)
            if self._var_of[f] < 0
        }
        self.touched_fixed = sorted(touched_fixed)
        self.scale_degenerate = len(touched_fixed) <= 1

        self._static = None
        self._maps = None

    @property
    def n_free_poses(self) -> int:
        return len(self.free_frames)

    @property
    def n_depths(self) -> int:
        return len(self.depth_keys)

    # -- state <-> arrays ----------------------------------------------------

    def state(self):
        g = self.graph
        q = np.stack([f.pose.q for f in g.frames])
        t = np.stack([f.pose.t for f in g.frames])
        d = np.array([g.patch(f, k).inverse_depth for f, k in self.depth_keys])
        return q, t, d

    def write_back(self, q, t, d) -> None:
        g = self.graph
        for f in self.free_frames:
            g.frames[f].pose = Pose(q[f], t[f])
        for row, (f, k) in enumerate(self.depth_keys):
            g.patches[f][k] = g.patches[f][k].with_inverse_depth(float(d[row]))

    def _structure(self):
        """Per-edge static arrays (rays, targets, weights, indices)."""
        if self._static is not None:
            return self._static
        g = self.graph
        edges = [g.edges[i] for i in self.edge_indices]
        rays = np.stack([g.patch_rays(e.src_frame, e.src_patch)
                         for e in edges]) if edges else np.zeros((0, 0, 3))
        self._static = {
            "src": np.array([e.src_frame for e in edges], dtype=int),
            "dst": np.array([e.dst_frame for e in edges], dtype=int),
            "depth_row": np.array([self._depth_row[(e.src_frame, e.src_patch)]
                                   for e in edges], dtype=int),
            "rays": rays,
            "target": np.stack([e.target for e in edges]) if edges else np.zeros((0, 0, 2)),
            "weight": np.stack([e.confidence for e in edges]) if edges else np.zeros((0, 2)),
        }
        return self._static

    def active_patch_count(self, confidence_gate: float = 0.5) -> int:
        """Reporting counter: patches in this problem with a confident edge."""
        return len(self.graph.active_patch_keys(self.edge_indices, confidence_gate))

    def _assembly_maps(self):
        """State-independent scatter/index structure of the normal equations."""
        if getattr(self, "_maps", None) is not None:
            return self._maps
        st = self._structure()
        n_free = self.n_free_poses
        n_depth = self.n_depths
        vi = self._var_of[st["src"]]
        vj = self._var_of[st["dst"]]
        not_self = st["src"] != st["dst"]
        rows_i = np.nonzero((vi >= 0) & not_self)[0]
        rows_j = np.nonzero((vj >= 0) & not_self)[0]
        rows_b = np.nonzero((vi >= 0) & (vj >= 0) & not_self)[0]

        # folded pose-pair keys: (a, a) diagonals plus one off-diagonal per edge
        key_parts = [vi[rows_i] * (n_free + 1), vj[rows_j] * (n_free + 1)]
        sign_parts = [np.ones(len(rows_i)), np.ones(len(rows_j))]
        row_parts = [rows_i, rows_j]
        if len(rows_b):
            a = np.minimum(vi[rows_b], vj[rows_b])
            b = np.maximum(vi[rows_b], vj[rows_b])
            key_parts.append(a * n_free + b)
            sign_parts.append(-np.ones(len(rows_b)))
            row_parts.append(rows_b)
        hpp_keys = np.concatenate(key_parts) if key_parts else np.zeros(0, dtype=int)
        hpp_sign = np.concatenate(sign_parts) if sign_parts else np.zeros(0)
        hpp_rows = np.concatenate(row_parts) if row_parts else np.zeros(0, dtype=int)

        # unique (pose var, depth row) incidences
        inc_keys = np.concatenate([
            vi[rows_i].astype(np.int64) * n_depth + st["depth_row"][rows_i],
            vj[rows_j].astype(np.int64) * n_depth + st["depth_row"][rows_j],
        ]) if len(rows_i) + len(rows_j) else np.zeros(0, dtype=np.int64)
        uniq_inc, inc_inv = np.unique(inc_keys, return_inverse=True)
        inc_var = (uniq_inc // n_depth).astype(int)
        inc_row = (uniq_inc % n_depth).astype(int)

        # ordered incidence pairs within each depth row (Schur fill structure)
        order = np.argsort(inc_row, kind="stable")
        s_var = inc_var[order]
        s_row = inc_row[order]
        counts = np.bincount(s_row, minlength=n_depth)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pair_counts = counts * counts
        total = int(pair_counts.sum())
        base = np.repeat(np.concatenate([[0], np.cumsum(pair_counts)[:-1]]), pair_counts)
        local = np.arange(total) - base
        mloc = np.repeat(counts, pair_counts)
        left = np.repeat(starts, pair_counts) + local // np.maximum(mloc, 1)
        right = np.repeat(starts, pair_counts) + local % np.maximum(mloc, 1)
        keep = s_var[left] <= s_var[right]
        left, right = left[keep], right[keep]
        schur_keys = s_var[left] * n_free + s_var[right]

        union_keys = np.unique(np.concatenate([
            hpp_keys, schur_keys,
            np.arange(n_free) * n_free + np.arange(n_free)]))
        self._maps = {
            "vi": vi, "vj": vj,
            "rows_i": rows_i, "rows_j": rows_j,
            "hpp_rows": hpp_rows, "hpp_sign": hpp_sign,
            "hpp_where": np.searchsorted(union_keys, hpp_keys),
            "inc_inv": inc_inv, "inc_var": inc_var, "inc_row": inc_row,
            "n_inc": len(uniq_inc),
            "pair_left": order[left], "pair_right": order[right],
            "pair_depth": inc_row[order[left]],
            "pair_where": np.searchsorted(union_keys, schur_keys),
            "union_keys": union_keys,
        }
        return self._maps


def residuals(problem: BAProblem, state=None):
    """Raw reprojection residuals per edge: (E, p*p, 2) plus validity mask.

    Cells behind the target camera are flagged False and carry zero weight in
    the objective; their residual values are meaningless.
    """
    st = problem._structure()
    if state is None:
        state = problem.state()
    q, t, d = state
    rot = quat_to_matrix(q)
    e = len(problem.edge_indices)
    if e == 0:
        return np.zeros((0, 0, 2)), np.zeros((0, 0), dtype=bool)
    res = np.empty_like(st["target"])
    valid = np.empty(st["target"].shape[:2], dtype=bool)
    for lo in range(0, e, _CHUNK):
        hi = min(lo + _CHUNK, e)
        sl = slice(lo, hi)
        pix, ok = reproject_grid(
            st["rays"][sl], d[st["depth_row"][sl]],
            rot[st["src"][sl]], t[st["src"][sl]],
            rot[st["dst"][sl]], t[st["dst"][sl]],
            problem.graph.intrinsics)
        res[sl] = pix - st["target"][sl]
        valid[sl] = ok
    return res, valid


def objective(problem: BAProblem, state=None) -> float:
    """Weighted objective: per-cell (x, y) components weighted by the edge confidence."""
    res, valid = residuals(problem, state)
    st = problem._structure()
    w = st["weight"][:, None, :] * valid[..., None]
    return float(np.sum(w * res * res))


# ---------------------------------------------------------------------------
# Normal equations assembly.


def _scatter_sum(idx: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    flat = values.reshape(len(values), -1)
    ncol = flat.shape[1]
    if ncol == 1:
        return np.bincount(idx, weights=flat[:, 0], minlength=size).reshape(
            (size,) + values.shape[1:])
    comp = (np.asarray(idx, dtype=np.int64)[:, None] * ncol
            + np.arange(ncol, dtype=np.int64)).ravel()
    out = np.bincount(comp, weights=flat.ravel(), minlength=size * ncol)
    return out.reshape((size,) + values.shape[1:])


@dataclass
class BlockSparseSystem:
    """Assembled normal equations with depths kept separable.

    ``pair_keys``/``pose_blocks`` hold the undamped pose Hessian on the
    frame-pair co-observation pattern (upper triangle, a <= b);
    ``schur_blocks`` hold the precomputed E C^-1 E^T on the same (unioned)
    pattern so that re-damping costs one axpy instead of a re-assembly.
    """

    n_pose: int
    n_depth: int
    pair_keys: np.ndarray        # (w, 2)
    pose_blocks: np.ndarray      # (w, 6, 6) undamped H blocks
    schur_blocks: np.ndarray     # (w, 6, 6) E C0^-1 E^T (undamped)
    depth_diag: np.ndarray       # (p,) undamped C
    rhs_pose: np.ndarray         # (f, 6)
    rhs_depth: np.ndarray        # (p,)
    rhs_schur: np.ndarray        # (f, 6) E C0^-1 w
    inc_var: np.ndarray          # (i,) incidence pose var
    inc_row: np.ndarray          # (i,) incidence depth row
    inc_block: np.ndarray        # (i, 6) coupling blocks
    active: np.ndarray           # (p,) depths with information
    damping: float = LM_LAMBDA_INIT
    scale_pin: tuple[int, np.ndarray] | None = None
    gradient_norm: float = 0.0

    @property
    def unconstrained_depths(self) -> int:
        return int((~self.active).sum())

    def reduced_system(self, lam: float):
        """Damped Schur-reduced camera system: (keys, blocks, rhs, cinv)."""
        blocks = self.pose_blocks - self.schur_blocks / (1.0 + lam)
        diag = self.pair_keys[:, 0] == self.pair_keys[:, 1]
        blocks = blocks.copy()
        eye = np.eye(6, dtype=bool)
        blocks[diag] += lam * self.pose_blocks[diag] * eye
        if self.scale_pin is not None:
            var, u = self.scale_pin
            rows = np.nonzero(diag & (self.pair_keys[:, 0] == var))[0]
            if len(rows):
                blk = blocks[rows[0]]
                mu = 1e6 * max(1.0, float(np.abs(np.diagonal(blk)).max()))
                blk[:3, :3] += mu * np.outer(u, u)
        rhs = self.rhs_pose - self.rhs_schur / (1.0 + lam)
        cinv = np.where(self.active, 1.0 / (self.depth_diag * (1.0 + lam) + ~self.active), 0.0)
        return self.pair_keys, blocks, rhs, cinv

    def back_substitute(self, delta_pose: np.ndarray, lam: float) -> np.ndarray:
        cinv = np.where(self.active, 1.0 / (self.depth_diag * (1.0 + lam) + ~self.active), 0.0)
        coupled = np.einsum("ia,ia->i", self.inc_block, delta_pose[self.inc_var])
        acc = _scatter_sum(self.inc_row, coupled, self.n_depth)
        return cinv * (self.rhs_depth - acc)


def assemble(problem: BAProblem, state=None) -> BlockSparseSystem:
    """Build the (undamped) normal equations for the current state."""
    st = problem._structure()
    if state is None:
        state = problem.state()
    q, t, d = state
    rot = quat_to_matrix(q)
    n_free = problem.n_free_poses
    n_depth = problem.n_depths
    var_of = problem._var_of
    e_total = len(problem.edge_indices)

    hpp = np.zeros((e_total, 6, 6))
    e_pd = np.zeros((e_total, 6))
    c_dd = np.zeros(e_total)
    g_p = np.zeros((e_total, 6))
    g_d = np.zeros(e_total)

    for lo in range(0, e_total, _CHUNK):
        hi = min(lo + _CHUNK, e_total)
        sl = slice(lo, hi)
        pix, ok, j_pose, j_depth = reproject_grid(
            st["rays"][sl], d[st["depth_row"][sl]],
            rot[st["src"][sl]], t[st["src"][sl]],
            rot[st["dst"][sl]], t[st["dst"][sl]],
            problem.graph.intrinsics, jacobians=True)
        res = pix - st["target"][sl]
        sw = np.sqrt(st["weight"][sl][:, None, :] * ok[..., None])
        ne, np2 = ok.shape
        # flatten cells: rows of the whitened per-edge Jacobian / residual
        jw = (j_pose * sw[..., None]).reshape(ne, np2 * 2, 6)
        rw = (res * sw).reshape(ne, np2 * 2, 1)
        jdw = (j_depth * sw).reshape(ne, np2 * 2, 1)
        jw_t = jw.swapaxes(-1, -2)
        hpp[sl] = jw_t @ jw
        e_pd[sl] = (jw_t @ jdw)[..., 0]
        c_dd[sl] = np.einsum("eri,eri->e", jdw, jdw)
        g_p[sl] = (jw_t @ rw)[..., 0]
        g_d[sl] = np.einsum("eri,eri->e", jdw, rw)

    maps = problem._assembly_maps()

    # depth side (self-edge terms vanish analytically but cost nothing)
    depth_diag = _scatter_sum(st["depth_row"], c_dd, n_depth)
    rhs_depth = -_scatter_sum(st["depth_row"], g_d, n_depth)
    active = depth_diag > _ACTIVE_EPS

    # pose rhs; source jacobian is J, destination is -J
    rhs_pose = np.zeros((n_free, 6))
    if len(maps["rows_i"]):
        rhs_pose += _scatter_sum(maps["vi"][maps["rows_i"]], -g_p[maps["rows_i"]], n_free)
    if len(maps["rows_j"]):
        rhs_pose += _scatter_sum(maps["vj"][maps["rows_j"]], g_p[maps["rows_j"]], n_free)

    union_keys = maps["union_keys"]
    pose_blocks = np.zeros((len(union_keys), 6, 6))
    schur_blocks = np.zeros((len(union_keys), 6, 6))

    # pose-pair Hessian blocks on the folded (a <= b) pattern; every block is
    # J^T J of one jacobian (the destination side is its negation), hence
    # symmetric, so folding never needs a transpose
    if len(maps["hpp_rows"]):
        vals = hpp[maps["hpp_rows"]] * maps["hpp_sign"][:, None, None]
        for lo in range(0, len(vals), _CHUNK * 4):
            hi = min(lo + _CHUNK * 4, len(vals))
            pose_blocks += _scatter_sum(maps["hpp_where"][lo:hi], vals[lo:hi],
                                        len(union_keys))

    # incidence list (pose var, depth row) with summed coupling blocks
    n_inc = maps["n_inc"]
    if n_inc:
        inc_vals = np.concatenate([e_pd[maps["rows_i"]], -e_pd[maps["rows_j"]]])
        inc_block = _scatter_sum(maps["inc_inv"], inc_vals, n_inc)
    else:
        inc_block = np.zeros((0, 6))
    inc_var, inc_row = maps["inc_var"], maps["inc_row"]

    cinv0 = np.where(active, 1.0 / (depth_diag + ~active), 0.0)
    left, right, gi = maps["pair_left"], maps["pair_right"], maps["pair_depth"]
    if len(left):
        for lo in range(0, len(left), _CHUNK * 4):
            hi = min(lo + _CHUNK * 4, len(left))
            contrib = (inc_block[left[lo:hi]] * cinv0[gi[lo:hi], None])[:, :, None] \
                * inc_block[right[lo:hi]][:, None, :]
            schur_blocks += _scatter_sum(maps["pair_where"][lo:hi], contrib,
                                         len(union_keys))

    rhs_schur = _scatter_sum(
        inc_var, inc_block * (cinv0[inc_row] * rhs_depth[inc_row])[:, None], n_free
    ) if len(inc_var) else np.zeros((n_free, 6))

    pin = None
    if problem.scale_degenerate and n_free > 0:
        anchor = problem.touched_fixed[0] if problem.touched_fixed else None
        t_ref = t[anchor] if anchor is not None else np.zeros(3)
        direction = t[problem.free_frames[0]] - t_ref
        norm = np.linalg.norm(direction)
        if norm > 1e-9:
            pin = (0, direction / norm)

    grad = float(max(
        np.abs(rhs_pose).max(initial=0.0),
        np.abs(rhs_depth[active]).max(initial=0.0),
    ))

    return BlockSparseSystem(
        n_pose=n_free, n_depth=n_depth,
        pair_keys=np.stack([union_keys // n_free, union_keys % n_free], axis=1),
        pose_blocks=pose_blocks, schur_blocks=schur_blocks,
        depth_diag=depth_diag, rhs_pose=rhs_pose, rhs_depth=rhs_depth,
        rhs_schur=rhs_schur, inc_var=inc_var, inc_row=inc_row,
        inc_block=inc_block, active=active, damping=problem.damping,
        scale_pin=pin, gradient_norm=grad)


# ---------------------------------------------------------------------------
# Backends.


def select_backend(problem: BAProblem, threshold: int = DEFAULT_BACKEND_THRESHOLD) -> str:
    return DENSE if problem.n_free_poses <= threshold else BLOCK_SPARSE


def solve_dense(system: BlockSparseSystem, lam: float | None = None):
    """Schur-reduce and factorize the full reduced camera matrix densely."""
    lam = system.damping if lam is None else lam
    keys, blocks, rhs, _ = system.reduced_system(lam)
    n = system.n_pose
    t0 = time.perf_counter()
    full = np.zeros((6 * n, 6 * n))
    for (a, b), blk in zip(keys, blocks):
        full[6 * a:6 * a + 6, 6 * b:6 * b + 6] = blk
        if a != b:
            full[6 * b:6 * b + 6, 6 * a:6 * a + 6] = blk.T
    try:
        cho = scipy.linalg.cho_factor(full, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(f"dense factorization failed: {exc}") from exc
    t1 = time.perf_counter()
    delta_pose = scipy.linalg.cho_solve(cho, rhs.ravel(), check_finite=False).reshape(n, 6)
    delta_depth = system.back_substitute(delta_pose, lam)
    t2 = time.perf_counter()
    stats = {"backend": DENSE, "factorize_s": t1 - t0, "solve_s": t2 - t1,
             "peak_block_count": n * n}
    return delta_pose, delta_depth, stats


def solve_block_sparse(system: BlockSparseSystem, lam: float | None = None):
    """Schur-reduce and factorize with the sparse block Cholesky."""
    lam = system.damping if lam is None else lam
    keys, blocks, rhs, _ = system.reduced_system(lam)
    t0 = time.perf_counter()
    factor = block_cholesky(keys, blocks, system.n_pose)
    t1 = time.perf_counter()
    delta_pose = factor.solve(rhs)
    delta_depth = system.back_substitute(delta_pose, lam)
    t2 = time.perf_counter()
    stats = {"backend": BLOCK_SPARSE, "factorize_s": t1 - t0, "solve_s": t2 - t1,
             "peak_block_count": factor.block_count}
    return delta_pose, delta_depth, stats


_BACKENDS = {DENSE: solve_dense, BLOCK_SPARSE: solve_block_sparse}


# ---------------------------------------------------------------------------
# Levenberg-Marquardt driver.


@dataclass
class BAReport:
    iterations: int
    initial_objective: float
    final_objective: float
    backend: str
    iteration_times: list[float] = field(default_factory=list)
    converged: bool = False
    gradient_norm: float = float("inf")
    unconstrained_depths: int = 0
    active_patches: int = 0
    final_damping: float = LM_LAMBDA_INIT
    step_norm: float = float("inf")

    def to_line(self) -> str:
        """One structured log line, key=value tokens."""
        times = ",".join(f"{t * 1e3:.3f}" for t in self.iteration_times)
        return (f"ba_report backend={self.backend} iterations={self.iterations} "
                f"initial={self.initial_objective:.6e} final={self.final_objective:.6e} "
                f"gradient={self.gradient_norm:.3e} converged={int(self.converged)} "
                f"unconstrained={self.unconstrained_depths} "
                f"active={self.active_patches} times_ms={times}")


def _apply_step(q, t, d, delta_pose, delta_depth, problem):
    q2, t2, d2 = q.copy(), t.copy(), d.copy()
    frames = problem.free_frames
    dq = rotvec_to_quat(delta_pose[:, 3:])
    qf = q[frames]
    tf = t[frames]
    q2[frames] = quat_normalize(quat_mul(dq, qf))
    t2[frames] = quat_rotate(dq, tf) + delta_pose[:, :3]
    d2 += delta_depth
    np.maximum(d2, INVERSE_DEPTH_FLOOR, out=d2)
    return q2, t2, d2


def solve(
    problem: BAProblem,
    max_iterations: int = 50,
    tolerance: float = 1e-9,
    backend: str | None = None,
    backend_threshold: int = DEFAULT_BACKEND_THRESHOLD,
) -> BAReport:
    """Levenberg-Marquardt over the problem; writes the result into the graph.

    Accepted steps never increase the objective.  A singular reduced system
    escalates damping up to a cap before surfacing SingularSystem.
    """
    chosen = backend or select_backend(problem, backend_threshold)
    solver = _BACKENDS[chosen]
    q, t, d = problem.state()
    obj = objective(problem, (q, t, d))
    report = BAReport(0, obj, obj, chosen,
                      active_patches=problem.active_patch_count())
    lam = problem.damping

    for _ in range(max_iterations):
        tic = time.perf_counter()
        system = assemble(problem, (q, t, d))
        report.gradient_norm = system.gradient_norm
        report.unconstrained_depths = system.unconstrained_depths

        accepted = False
        solved_once = False
        singular: SingularSystem | None = None
        for _ in range(LM_MAX_ESCALATIONS + 1):
            try:
                delta_pose, delta_depth, _ = solver(system, lam)
            except SingularSystem as exc:
                singular = exc
                lam *= LM_LAMBDA_GROW
                if lam > LM_LAMBDA_MAX:
                    raise
                continue
            solved_once = True
            cand = _apply_step(q, t, d, delta_pose, delta_depth, problem)
            cand_obj = objective(problem, cand)
            if cand_obj <= obj * (1 + 1e-12) + 1e-300:
                q, t, d = cand
                obj = min(cand_obj, obj)
                report.step_norm = float(np.sqrt(
                    (delta_pose ** 2).sum() + (delta_depth ** 2).sum()))
                lam = max(lam * LM_LAMBDA_SHRINK, 1e-12)
                accepted = True
                break
            lam *= LM_LAMBDA_GROW
            if lam > LM_LAMBDA_MAX:
                break

        report.iteration_times.append(time.perf_counter() - tic)
        if not accepted:
            if singular is not None and not solved_once:
                raise singular
            break
        report.iterations += 1
        report.final_objective = obj
        if system.gradient_norm < tolerance:
            report.converged = True
            break
    else:
        report.converged = report.gradient_norm < tolerance

    if report.gradient_norm < tolerance:
        report.converged = True
    report.final_damping = lam
    problem.damping = lam
    problem.write_back(q, t, d)
    return report
