import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from patchslam.errors import BehindCamera, NonPositiveDepth
from patchslam.geometry import (
    Intrinsics,
    Patch,
    Pose,
    Similarity,
    _coupling_matrix,
    backproject,
    matrix_to_quat,
    pinhole_rays,
    project,
    quat_to_matrix,
    reproject_grid,
    reproject_patch,
    sim3_ad,
    sim3_exp,
    sim3_left_jacobian,
    sim3_log,
    skew,
    square_grid,
)

INTR = Intrinsics(320.0, 320.0, 256.0, 192.0)


def random_pose(rng, scale=0.5):
    return Pose.exp(rng.normal(0, scale, 6))


def random_sim(rng, scale=0.5):
    return sim3_exp(rng.normal(0, scale, 7))


def sim_allclose(a: Similarity, b: Similarity, atol=1e-9):
    return (np.allclose(a.t, b.t, atol=atol)
            and abs(a.s - b.s) <= atol * max(1.0, a.s)
            and min(np.abs(a.q @ b.q - 1), np.abs(a.q @ b.q + 1)) < atol)


class TestProjection:
    def test_optical_axis(self):
        intr = Intrinsics(1.0, 1.0, 0.0, 0.0)
        assert np.allclose(project(np.array([0.0, 0.0, 1.0]), intr), [0.0, 0.0])

    def test_closed_form(self):
        intr = Intrinsics(100.0, 100.0, 50.0, 50.0)
        assert np.allclose(project(np.array([1.0, 2.0, 2.0]), intr), [100.0, 150.0])

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            fx, fy = rng.uniform(50, 500, 2)
            cx, cy = rng.uniform(-50, 500, 2)
            intr = Intrinsics(fx, fy, cx, cy)
            p = rng.uniform([-5, -5, 0.2], [5, 5, 30])
            u = project(p, intr)
            assert u[0] == pytest.approx(fx * p[0] / p[2] + cx, rel=1e-12)
            assert u[1] == pytest.approx(fy * p[1] / p[2] + cy, rel=1e-12)

    def test_nonpositive_depth_raises(self):
        with pytest.raises(NonPositiveDepth):
            project(np.array([0.0, 0.0, 0.0]), INTR)
        with pytest.raises(NonPositiveDepth):
            project(np.array([1.0, 1.0, -2.0]), INTR)


class TestBackprojection:
    def test_principal_point_unit_depth(self):
        intr = Intrinsics(100.0, 100.0, 320.0, 240.0)
        assert np.allclose(backproject(np.array([320.0, 240.0]), 1.0, intr), [0, 0, 1])

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            pix = rng.uniform([0, 0], [512, 384])
            d = rng.uniform(1e-2, 10.0)
            back = backproject(pix, d, INTR)
            worst = max(worst, np.abs(project(back, INTR) - pix).max())
        assert worst < 1e-9

    def test_zero_inverse_depth_raises(self):
        with pytest.raises(NonPositiveDepth):
            backproject(np.array([0.0, 0.0]), 0.0, INTR)


class TestPatchReprojection:
    def test_identity_transform_returns_grid(self):
        patch = Patch.square(0, np.array([200.0, 150.0]), 0.5)
        pix, valid = reproject_patch(patch, Pose.identity(), Pose.identity(), INTR)
        assert valid.all()
        assert np.allclose(pix, patch.grid, atol=1e-12)

    def test_axial_translation_doubles_offsets(self):
        # camera j moves half the patch depth along the optical axis, so the
        # pixel offsets from the principal point double (similar triangles)
        intr = Intrinsics(100.0, 100.0, 0.0, 0.0)
        depth = 4.0
        patch = Patch.square(0, np.array([30.0, 18.0]), 1.0 / depth)
        move = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, depth / 2]))
        pix, valid = reproject_patch(patch, Pose.identity(), move, intr)
        assert valid.all()
        assert np.allclose(pix, 2.0 * patch.grid, atol=1e-9)

    def test_matches_per_cell_composition(self):
        rng = np.random.default_rng(2)
        done = 0
        while done < 50:
            gi, gj = random_pose(rng, 0.3), random_pose(rng, 0.3)
            patch = Patch.square(0, rng.uniform([64, 48], [448, 336]),
                                 rng.uniform(0.05, 1.0))
            pix, valid = reproject_patch(patch, gi, gj, INTR)
            if not valid.all():
                continue
            for cell in range(patch.grid.shape[0]):
                p3 = backproject(patch.grid[cell], patch.inverse_depth, INTR)
                cam_j = gj.inverse().act(gi.act(p3))
                assert np.allclose(pix[cell], project(cam_j, INTR), atol=1e-9)
            done += 1

    def test_strict_raises_behind_camera(self):
        patch = Patch.square(0, np.array([256.0, 192.0]), 1.0)
        behind = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, 5.0]))
        with pytest.raises(BehindCamera):
            reproject_patch(patch, Pose.identity(), behind, INTR, strict=True)


class TestLieGroups:
    def test_pose_round_trip(self):
        # exp/log are mutually inverse only below the pi rotation cut
        rng = np.random.default_rng(3)
        for _ in range(500):
            xi = rng.normal(0, 1.0, 6)
            norm = np.linalg.norm(xi[3:])
            if norm >= np.pi - 1e-3:
                xi[3:] *= (np.pi - 1e-2) / norm
            assert np.allclose(Pose.exp(xi).log(), xi, atol=1e-10)

    def test_sim3_zero_tangent_is_identity(self):
        s = sim3_exp(np.zeros(7))
        assert sim_allclose(s, Similarity.identity(), atol=1e-15)
        assert np.allclose(sim3_log(Similarity.identity()), np.zeros(7))

    def test_sim3_pure_log_scale(self):
        s = sim3_exp(np.array([0, 0, 0, 0, 0, 0, 0.7]))
        assert s.s == pytest.approx(np.exp(0.7), rel=1e-12)
        assert np.allclose(s.t, 0) and np.allclose(s.q, [0, 0, 0, 1])

    def test_sim3_round_trip_10k(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(10_000):
            t = rng.normal(0, 1.0, 7)
            t[3:6] *= (np.pi - 1e-2) / max(np.linalg.norm(t[3:6]), np.pi)
            t[6] = rng.uniform(np.log(1e-3), np.log(1e3))
            worst = max(worst, np.abs(sim3_log(sim3_exp(t)) - t).max())
        assert worst < 1e-9

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = random_pose(rng, 1.0)
            assert np.linalg.norm((p * p.inverse()).log()) < 1e-9
            assert np.linalg.norm((p.inverse() * p).log()) < 1e-9
            s = random_sim(rng, 1.0)
            assert np.linalg.norm(sim3_log(s * s.inverse())) < 1e-9
            assert np.linalg.norm(sim3_log(s.inverse() * s)) < 1e-9

    def test_associativity(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            a, b, c = (random_sim(rng, 0.8) for _ in range(3))
            lhs = (a * b) * c
            rhs = a * (b * c)
            assert sim_allclose(lhs, rhs, atol=1e-9)

    def test_quaternion_norm_survives_long_chains(self):
        rng = np.random.default_rng(7)
        p = Pose.identity()
        for _ in range(1000):
            p = p * random_pose(rng, 0.3)
            assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9

    def test_adjoint_consistency(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            s = random_sim(rng, 0.6)
            t = rng.normal(0, 0.4, 7)
            lhs = sim3_exp(s.adjoint() @ t)
            rhs = s * sim3_exp(t) * s.inverse()
            assert sim_allclose(lhs, rhs, atol=1e-8)
            p = random_pose(rng, 0.6)
            xi = rng.normal(0, 0.4, 6)
            lhs_p = Pose.exp(p.adjoint() @ xi)
            rhs_p = p * Pose.exp(xi) * p.inverse()
            assert np.linalg.norm((lhs_p.inverse() * rhs_p).log()) < 1e-8

    def test_algebra_adjoint_matches_group_adjoint(self):
        import scipy.linalg
        rng = np.random.default_rng(9)
        for _ in range(50):
            x = rng.normal(0, 0.5, 7)
            assert np.allclose(sim3_exp(x).adjoint(),
                               scipy.linalg.expm(sim3_ad(x)), atol=1e-9)

    def test_coupling_matrix_against_quadrature(self):
        # independent oracle: Gauss-Legendre quadrature of the defining integral
        nodes, weights = leggauss(60)
        rng = np.random.default_rng(10)
        for _ in range(30):
            phi = rng.normal(0, 1.0, 3)
            sigma = rng.normal(0, 0.8)
            acc = np.zeros((3, 3))
            for u, w in zip(0.5 * (nodes + 1), weights):
                rot = quat_to_matrix(
                    sim3_exp(np.concatenate([np.zeros(3), u * phi, [0.0]])).q)
                acc += 0.5 * w * np.exp(sigma * u) * rot
            assert np.allclose(acc, _coupling_matrix(phi, sigma), atol=1e-10)

    def test_left_jacobian_against_quadrature(self):
        nodes, weights = leggauss(60)
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = rng.normal(0, 0.5, 7)
            acc = sum(0.5 * w * sim3_exp(0.5 * (u + 1) * x).adjoint()
                      for u, w in zip(nodes, weights))
            assert np.allclose(acc, sim3_left_jacobian(x), atol=1e-9)

    def test_scale_one_similarity_acts_like_pose(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            p = random_pose(rng, 0.8)
            s = Similarity.from_pose(p)
            pts = rng.normal(0, 3.0, (10, 3))
            assert np.allclose(s.act(pts), p.act(pts), atol=1e-12)

    def test_similarity_action_convention(self):
        # fixed convention: x -> s * R @ x + t
        rng = np.random.default_rng(13)
        s = random_sim(rng, 0.5)
        x = rng.normal(0, 2.0, 3)
        expected = s.s * quat_to_matrix(s.q) @ x + s.t
        assert np.allclose(s.act(x), expected, atol=1e-12)

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            Similarity(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), -1.0)

    def test_matrix_quaternion_round_trip(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            q = rng.normal(0, 1, 4)
            q /= np.linalg.norm(q)
            q2 = matrix_to_quat(quat_to_matrix(q))
            assert min(np.abs(q @ q2 - 1), np.abs(q @ q2 + 1)) < 1e-12


class TestReprojectionJacobians:
    def test_analytic_matches_central_differences(self):
        rng = np.random.default_rng(15)
        checked = 0
        h = 1e-6
        while checked < 100:
            gi, gj = random_pose(rng, 0.3), random_pose(rng, 0.3)
            d = rng.uniform(0.05, 1.0)
            patch = Patch.square(0, rng.uniform([64, 48], [448, 336]), d)
            rays = pinhole_rays(patch.grid, INTR)[None]
            pix, valid, j_pose, j_depth = reproject_grid(
                rays, np.array([d]), gi.rotation_matrix()[None], gi.t[None],
                gj.rotation_matrix()[None], gj.t[None], INTR, jacobians=True)
            if not valid.all():
                continue

            def num(fun):
                return np.stack([fun(eps) for eps in (h, -h)])

            for axis in range(6):
                dx = np.zeros(6)
                dx[axis] = h
                pp, _ = reproject_patch(patch, Pose.exp(dx) * gi, gj, INTR)
                pm, _ = reproject_patch(patch, Pose.exp(-dx) * gi, gj, INTR)
                fd = (pp - pm) / (2 * h)
                scale = np.maximum(np.abs(fd), 1.0)
                assert (np.abs(fd - j_pose[0, :, :, axis]) / scale).max() < 1e-4
                pp, _ = reproject_patch(patch, gi, Pose.exp(dx) * gj, INTR)
                pm, _ = reproject_patch(patch, gi, Pose.exp(-dx) * gj, INTR)
                fd = (pp - pm) / (2 * h)
                assert (np.abs(fd + j_pose[0, :, :, axis]) / scale).max() < 1e-4
            pp, _ = reproject_patch(patch.with_inverse_depth(d + h), gi, gj, INTR)
            pm, _ = reproject_patch(patch.with_inverse_depth(d - h), gi, gj, INTR)
            fd = (pp - pm) / (2 * h)
            scale = np.maximum(np.abs(fd), 1.0)
            assert (np.abs(fd - j_depth[0]) / scale).max() < 1e-4
            checked += 1


class TestPatchType:
    def test_square_constructor(self):
        patch = Patch.square(3, np.array([10.0, 20.0]), 0.25, patch_size=5)
        assert patch.size == 5
        assert np.allclose(patch.center, [10.0, 20.0])
        assert patch.grid.shape == (25, 2)
        # unit spacing, axis aligned
        assert np.allclose(np.diff(patch.grid[:5, 1]), 0.0)

    def test_rejects_non_square_grid(self):
        bad = square_grid(np.array([5.0, 5.0]), 3)
        bad = bad.copy()
        bad[0] += 0.5
        with pytest.raises(ValueError):
            Patch(0, bad, 1.0)

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(NonPositiveDepth):
            Patch.square(0, np.array([5.0, 5.0]), 0.0)
        with pytest.raises(NonPositiveDepth):
            Patch.square(0, np.array([5.0, 5.0]), 1.0).with_inverse_depth(-2.0)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, 1.0, 0.0, 0.0)


def test_skew_antisymmetry():
    rng = np.random.default_rng(16)
    v = rng.normal(0, 1, (7, 3))
    m = skew(v)
    assert np.allclose(m, -m.swapaxes(-1, -2))
    assert np.allclose(m @ v[..., None], 0)
