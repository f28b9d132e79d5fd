"""Rigid and similarity transforms, pinhole projection, and patch reprojection.

Conventions used everywhere in this package:

- Quaternions are stored as (qx, qy, qz, qw), unit norm, and renormalized
  after every composition.
- ``Pose`` maps camera coordinates to world coordinates: ``x_w = R x_c + t``.
- ``Similarity`` acts as ``x -> s * R @ x + t`` (scale multiplies the rotated
  point, matching the inverse-depth rescale rule ``d <- d / s``).
- Tangent vectors are ordered (translational, rotational) for SE(3) and
  (translational, rotational, log-scale) for Sim(3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NonPositiveDepth, BehindCamera

# Depth below this is treated as "behind the camera".
DEPTH_EPS = 1e-8
# Small-angle threshold for Taylor branches in quaternion exp/log.
SMALL_ANGLE = 1e-8
# Inverse depths are clamped here during optimization updates.
INVERSE_DEPTH_FLOOR = 1e-6
# Side length of the square pixel grid attached to each keypoint.
DEFAULT_PATCH_SIZE = 3


# ---------------------------------------------------------------------------
# Quaternion helpers (broadcast over leading axes).


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (..., 4) arrays in (x, y, z, w) order."""
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, copy=True)
    out[..., :3] *= -1.0
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by quaternions q (..., 4)."""
    xyz = q[..., :3]
    w = q[..., 3:]
    t = 2.0 * np.cross(xyz, v)
    return v + w * t + np.cross(xyz, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    x, y, z, w = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (yy + zz)
    m[..., 0, 1] = 2 * (xy - wz)
    m[..., 0, 2] = 2 * (xz + wy)
    m[..., 1, 0] = 2 * (xy + wz)
    m[..., 1, 1] = 1 - 2 * (xx + zz)
    m[..., 1, 2] = 2 * (yz - wx)
    m[..., 2, 0] = 2 * (xz - wy)
    m[..., 2, 1] = 2 * (yz + wx)
    m[..., 2, 2] = 1 - 2 * (xx + yy)
    return m


def rotvec_to_quat(phi: np.ndarray) -> np.ndarray:
    """Quaternion exp of rotation vectors (..., 3)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(theta/2)/theta, Taylor below the small-angle threshold
    small = theta < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    q = np.empty(phi.shape[:-1] + (4,))
    q[..., :3] = phi * k
    q[..., 3] = np.cos(half)[..., 0]
    return q


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector log of unit quaternions (..., 4)."""
    q = np.asarray(q, dtype=float)
    # force w >= 0 so the angle lands in [0, pi]
    q = np.where(q[..., 3:] < 0, -q, q)
    n = np.linalg.norm(q[..., :3], axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(n[..., 0], q[..., 3])[..., None]
    small = n < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0 / q[..., 3:], theta / np.where(small, 1.0, n))
    return q[..., :3] * k


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) from a 3x3 rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s,
                      (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s,
                      0.25 * s, (m[1, 0] - m[0, 1]) / s])
    return quat_normalize(q)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices (..., 3, 3) of vectors (..., 3)."""
    x, y, z = np.moveaxis(v, -1, 0)
    zero = np.zeros_like(x)
    return np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(v.shape[:-1] + (3, 3))


def _coupling_matrix(phi: np.ndarray, sigma: float) -> np.ndarray:
    """Integral of exp(u*(sigma*I + [phi]x)) over u in [0, 1].

    Couples the translational tangent to rotation and scale in the Sim(3)
    exponential; sigma = 0 gives the classical SE(3) V matrix.  Computed as
    the phi_1 matrix function via a block expm, which is branch-free and
    exact near the small-angle/small-scale degeneracies.
    """
    m = sigma * np.eye(3) + skew(np.asarray(phi, dtype=float))
    blk = np.zeros((6, 6))
    blk[:3, :3] = m
    blk[:3, 3:] = np.eye(3)
    return scipy.linalg.expm(blk)[:3, 3:]


# ---------------------------------------------------------------------------
# SE(3) and Sim(3) value types.


def _frozen_array(a, shape) -> np.ndarray:
    out = np.array(a, dtype=float).reshape(shape)
    out.flags.writeable = False
    return out


def _renormalized(q: np.ndarray) -> np.ndarray:
    """Renormalize only on actual drift, keeping fixture round trips bit-exact."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-12:
        return q / norm
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """World-from-camera rigid transform (unit quaternion + translation)."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen_array(_renormalized(self.q), (4,)))
        object.__setattr__(self, "t", _frozen_array(self.t, (3,)))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose":
        """Exponential of a tangent (rho, phi)."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        q = rotvec_to_quat(xi[3:])
        t = _coupling_matrix(xi[3:], 0.0) @ xi[:3]
        return Pose(q, t)

    def log(self) -> np.ndarray:
        phi = quat_to_rotvec(self.q)
        rho = np.linalg.solve(_coupling_matrix(phi, 0.0), self.t)
        return np.concatenate([rho, phi])

    def __mul__(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qc = quat_conj(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def act(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(points, dtype=float)) + self.t

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def adjoint(self) -> np.ndarray:
        r = self.rotation_matrix()
        ad = np.zeros((6, 6))
        ad[:3, :3] = r
        ad[:3, 3:] = skew(self.t) @ r
        ad[3:, 3:] = r
        return ad

    def as_array(self) -> np.ndarray:
        """(tx, ty, tz, qx, qy, qz, qw), the storage and file order."""
        return np.concatenate([self.t, self.q])

    @staticmethod
    def from_array(a: np.ndarray) -> "Pose":
        a = np.asarray(a, dtype=float).reshape(7)
        return Pose(a[3:], a[:3])

    def __repr__(self):
        return f"Pose(t={self.t.tolist()}, q={self.q.tolist()})"


@dataclass(frozen=True, eq=False)
class Similarity:
    """7-DOF similarity transform: x -> s * R @ x + t, with s > 0."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")
        object.__setattr__(self, "q", _frozen_array(_renormalized(self.q), (4,)))
        object.__setattr__(self, "t", _frozen_array(self.t, (3,)))
        object.__setattr__(self, "s", float(self.s))

    @staticmethod
    def identity() -> "Similarity":
        return Similarity()

    @staticmethod
    def from_pose(pose: Pose, scale: float = 1.0) -> "Similarity":
        return Similarity(pose.q, pose.t, scale)

    def to_pose(self) -> Pose:
        """Drop the scale; translation and rotation carry over unchanged."""
        return Pose(self.q, self.t)

    def __mul__(self, other: "Similarity") -> "Similarity":
        return Similarity(
            quat_mul(self.q, other.q),
            self.s * quat_rotate(self.q, other.t) + self.t,
            self.s * other.s,
        )

    def inverse(self) -> "Similarity":
        qc = quat_conj(self.q)
        return Similarity(qc, -quat_rotate(qc, self.t) / self.s, 1.0 / self.s)

    def act(self, points: np.ndarray) -> np.ndarray:
        return self.s * quat_rotate(self.q, np.asarray(points, dtype=float)) + self.t

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def adjoint(self) -> np.ndarray:
        r = self.rotation_matrix()
        ad = np.zeros((7, 7))
        ad[:3, :3] = self.s * r
        ad[:3, 3:6] = skew(self.t) @ r
        ad[:3, 6] = -self.t
        ad[3:6, 3:6] = r
        ad[6, 6] = 1.0
        return ad

    def __repr__(self):
        return f"Similarity(t={self.t.tolist()}, q={self.q.tolist()}, s={self.s})"


def sim3_exp(tangent: np.ndarray) -> Similarity:
    """Exponential of a 7-vector (rho, phi, sigma)."""
    tangent = np.asarray(tangent, dtype=float).reshape(7)
    rho, phi, sigma = tangent[:3], tangent[3:6], tangent[6]
    q = rotvec_to_quat(phi)
    t = _coupling_matrix(phi, sigma) @ rho
    return Similarity(q, t, float(np.exp(sigma)))


def sim3_log(sim: Similarity) -> np.ndarray:
    """Logarithm of a Similarity; inverse of :func:`sim3_exp`."""
    phi = quat_to_rotvec(sim.q)
    sigma = np.log(sim.s)
    rho = np.linalg.solve(_coupling_matrix(phi, sigma), sim.t)
    return np.concatenate([rho, phi, [sigma]])


def sim3_ad(tangent: np.ndarray) -> np.ndarray:
    """Algebra adjoint ad_x of a sim(3) tangent; satisfies Adj(exp x) = expm(ad_x)."""
    tangent = np.asarray(tangent, dtype=float).reshape(7)
    rho, phi, sigma = tangent[:3], tangent[3:6], tangent[6]
    ad = np.zeros((7, 7))
    ad[:3, :3] = skew(phi) + sigma * np.eye(3)
    ad[:3, 3:6] = skew(rho)
    ad[:3, 6] = -rho
    ad[3:6, 3:6] = skew(phi)
    return ad


def sim3_left_jacobian(tangent: np.ndarray) -> np.ndarray:
    """Left Jacobian of Sim(3): integral of Adj(exp(u x)) over u in [0, 1]."""
    ad = sim3_ad(tangent)
    blk = np.zeros((14, 14))
    blk[:7, :7] = ad
    blk[:7, 7:] = np.eye(7)
    return scipy.linalg.expm(blk)[:7, 7:]


def sim3_right_jacobian_inv(tangent: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian; d/d(eps) log(exp(x) exp(eps v)) = Jr_inv(x) v."""
    return np.linalg.inv(sim3_left_jacobian(-np.asarray(tangent, dtype=float)))


# ---------------------------------------------------------------------------
# Pinhole camera.


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


def project(point: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of a 3D point; raises NonPositiveDepth for z <= eps."""
    point = np.asarray(point, dtype=float)
    z = point[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth(f"cannot project point(s) with depth <= {DEPTH_EPS}")
    u = intr.fx * point[..., 0] / z + intr.cx
    v = intr.fy * point[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(pixel: np.ndarray, inverse_depth: float, intr: Intrinsics) -> np.ndarray:
    """Lift a pixel to 3D at the given inverse depth."""
    if not inverse_depth > 0:
        raise NonPositiveDepth(f"inverse depth must be positive, got {inverse_depth}")
    pixel = np.asarray(pixel, dtype=float)
    x = (pixel[..., 0] - intr.cx) / intr.fx
    y = (pixel[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1) / inverse_depth


def pinhole_rays(pixels: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Unit-depth rays (..., 3) for pixels (..., 2)."""
    pixels = np.asarray(pixels, dtype=float)
    x = (pixels[..., 0] - intr.cx) / intr.fx
    y = (pixels[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


# ---------------------------------------------------------------------------
# Patches.


def square_grid(center: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Axis-aligned p x p grid of unit pixel spacing centered on a keypoint.

    Row-major (p*p, 2) pixel coordinates.
    """
    center = np.asarray(center, dtype=float).reshape(2)
    half = (patch_size - 1) / 2.0
    offs = np.arange(patch_size) - half
    gy, gx = np.meshgrid(offs, offs, indexing="ij")
    return np.stack([gx.ravel() + center[0], gy.ravel() + center[1]], axis=-1)


@dataclass(frozen=True, eq=False)
class Patch:
    """A p x p pixel grid sharing one inverse depth, owned by a source frame."""

    frame_id: int
    grid: np.ndarray
    inverse_depth: float
    landmark_id: int | None = None

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).reshape(-1, 2)
        p = int(round(np.sqrt(grid.shape[0])))
        if p * p != grid.shape[0]:
            raise ValueError(f"patch grid must have p*p cells, got {grid.shape[0]}")
        center = grid.mean(axis=0)
        if not np.allclose(grid, square_grid(center, p), atol=1e-6):
            raise ValueError("patch grid is not an axis-aligned unit-spacing square")
        if not self.inverse_depth > 0:
            raise NonPositiveDepth(f"patch inverse depth must be positive, got {self.inverse_depth}")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "inverse_depth", float(self.inverse_depth))

    @staticmethod
    def square(
        frame_id: int,
        center: np.ndarray,
        inverse_depth: float,
        patch_size: int = DEFAULT_PATCH_SIZE,
        landmark_id: int | None = None,
    ) -> "Patch":
        return Patch(frame_id, square_grid(center, patch_size), inverse_depth, landmark_id)

    @property
    def size(self) -> int:
        return int(round(np.sqrt(self.grid.shape[0])))

    @property
    def center(self) -> np.ndarray:
        return self.grid.mean(axis=0)

    def with_inverse_depth(self, d: float) -> "Patch":
        # hot path during optimization write-back: the grid is already
        # validated and shared, only the depth invariant needs checking
        if not d > 0:
            raise NonPositiveDepth(f"patch inverse depth must be positive, got {d}")
        out = object.__new__(Patch)
        object.__setattr__(out, "frame_id", self.frame_id)
        object.__setattr__(out, "grid", self.grid)
        object.__setattr__(out, "inverse_depth", float(d))
        object.__setattr__(out, "landmark_id", self.landmark_id)
        return out


# ---------------------------------------------------------------------------
# Patch reprojection (batched core + single-patch wrapper).


def project_array(points: np.ndarray, intr: Intrinsics, eps: float = DEPTH_EPS):
    """Project (..., 3) points; invalid depths are masked, not fatal."""
    z = points[..., 2]
    valid = z > eps
    zs = np.where(valid, z, 1.0)
    u = intr.fx * points[..., 0] / zs + intr.cx
    v = intr.fy * points[..., 1] / zs + intr.cy
    return np.stack([u, v], axis=-1), valid


def reproject_grid(
    rays: np.ndarray,
    inverse_depth: np.ndarray,
    rot_i: np.ndarray,
    t_i: np.ndarray,
    rot_j: np.ndarray,
    t_j: np.ndarray,
    intr: Intrinsics,
    jacobians: bool = False,
):
    """Reproject per-edge patch grids from source frames i into target frames j.

    rays:          (E, m, 3) unit-depth rays of the grid cells in camera i
    inverse_depth: (E,) shared inverse depth per edge
    rot_i, t_i:    (E, 3, 3), (E, 3) world-from-camera of the source frames
    rot_j, t_j:    same for the target frames

    Returns (pixels (E, m, 2), valid (E, m)) and, with ``jacobians=True``,
    additionally (J_pose (E, m, 2, 6), J_depth (E, m, 2)).  J_pose is the
    derivative w.r.t. a left-multiplicative tangent update of the *source*
    pose; the target-pose derivative is its negation.
    """
    x_cam = rays / inverse_depth[:, None, None]
    x_world = x_cam @ rot_i.swapaxes(-1, -2) + t_i[:, None, :]
    x_tgt = (x_world - t_j[:, None, :]) @ rot_j

    z = x_tgt[..., 2]
    valid = z > DEPTH_EPS
    zs = np.where(valid, z, 1.0)
    pix = np.stack(
        [intr.fx * x_tgt[..., 0] / zs + intr.cx, intr.fy * x_tgt[..., 1] / zs + intr.cy],
        axis=-1,
    )
    if not jacobians:
        return pix, valid

    e, m = z.shape
    jproj = np.zeros((e, m, 2, 3))
    jproj[..., 0, 0] = intr.fx / zs
    jproj[..., 0, 2] = -intr.fx * x_tgt[..., 0] / (zs * zs)
    jproj[..., 1, 1] = intr.fy / zs
    jproj[..., 1, 2] = -intr.fy * x_tgt[..., 1] / (zs * zs)

    # chain through R_j^T; world-side perturbation bracket is [I | -skew(x_world)]
    a = (jproj.reshape(e, m * 2, 3) @ rot_j.swapaxes(-1, -2)).reshape(e, m, 2, 3)
    j_pose = np.empty((e, m, 2, 6))
    j_pose[..., :3] = a
    # row_c of (A @ skew(x)) equals row_c x x, so the rotational part is x x A
    j_pose[..., 3:] = np.cross(x_world[:, :, None, :], a)
    dxw_dd = (t_i[:, None, :] - x_world) / inverse_depth[:, None, None]
    j_depth = (a * dxw_dd[:, :, None, :]).sum(-1)
    return pix, valid, j_pose, j_depth


def reproject_patch(
    patch: Patch,
    pose_i: Pose,
    pose_j: Pose,
    intr: Intrinsics,
    strict: bool = False,
):
    """Reproject one patch from its source frame into frame j.

    Returns (pixels (p*p, 2), valid (p*p,)).  With ``strict=True`` a cell
    behind the target camera raises BehindCamera instead of being masked.
    """
    rays = pinhole_rays(patch.grid, intr)[None]
    pix, valid = reproject_grid(
        rays,
        np.array([patch.inverse_depth]),
        pose_i.rotation_matrix()[None],
        pose_i.t[None],
        pose_j.rotation_matrix()[None],
        pose_j.t[None],
        intr,
    )
    if strict and not valid.all():
        raise BehindCamera(f"{int((~valid).sum())} patch cell(s) reprojected behind the camera")
    return pix[0], valid[0]
