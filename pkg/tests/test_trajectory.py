import numpy as np
import pytest

from patchslam.errors import NoAssociations, ParseError
from patchslam.geometry import Pose, sim3_exp
from patchslam.trajectory import Trajectory, associate, ate, read_tum, write_tum


def random_trajectory(rng, n=20, dt=0.1):
    poses = [Pose.exp(rng.normal(0, 0.4, 6)) for _ in range(n)]
    return Trajectory(np.arange(n) * dt, poses)


class TestTum:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        traj = random_trajectory(rng)
        path = tmp_path / "traj.tum"
        write_tum(traj, path)
        loaded = read_tum(path)
        assert np.array_equal(loaded.timestamps, traj.timestamps)
        for a, b in zip(traj.poses, loaded.poses):
            assert np.array_equal(a.as_array(), b.as_array())

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "bad.tum"
        path.write_text("# header\n0.0 0 0 0 0 0 0 1\n0.1 nope 0 0 0 0 0 1\n")
        with pytest.raises(ParseError) as err:
            read_tum(path)
        assert ":3:" in str(err.value)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "bad.tum"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(ParseError):
            read_tum(path)

    def test_denormalized_quaternion_warns_and_normalizes(self, tmp_path):
        path = tmp_path / "denorm.tum"
        path.write_text("0.0 0 0 0 0 0 0 1.1\n0.5 1 0 0 0 0 0 1\n")
        with pytest.warns(UserWarning, match="normalizing"):
            traj = read_tum(path)
        assert np.linalg.norm(traj.poses[0].q) == pytest.approx(1.0, abs=1e-12)

    def test_timestamps_must_increase(self):
        with pytest.raises(ValueError):
            Trajectory(np.array([0.0, 0.0]), [Pose.identity(), Pose.identity()])


class TestAssociate:
    def test_within_gate(self):
        a = Trajectory(np.array([0.0, 0.1, 0.2]), [Pose.identity()] * 3)
        b = Trajectory(np.array([0.005, 0.105, 0.5]), [Pose.identity()] * 3)
        ia, ib = associate(a, b, gate=0.02)
        assert list(ia) == [0, 1] and list(ib) == [0, 1]

    def test_no_associations_raises(self):
        a = Trajectory(np.array([0.0]), [Pose.identity()])
        b = Trajectory(np.array([5.0]), [Pose.identity()])
        with pytest.raises(NoAssociations):
            associate(a, b)


class TestAte:
    def test_identical_trajectories_zero(self):
        rng = np.random.default_rng(1)
        traj = random_trajectory(rng)
        assert ate(traj, traj) == pytest.approx(0.0, abs=1e-12)
        assert ate(traj, traj, alignment="se3") == pytest.approx(0.0, abs=1e-12)

    def test_sim3_alignment_absorbs_similarity(self):
        rng = np.random.default_rng(2)
        ref = random_trajectory(rng, n=30)
        s = sim3_exp(np.array([0.4, -0.2, 0.1, 0.2, -0.1, 0.3, np.log(1.7)]))
        est = Trajectory(ref.timestamps,
                         [Pose(p.q, s.act(p.t)) for p in ref.poses])
        assert ate(est, ref, alignment="sim3") < 1e-9

    def test_constructed_offset_matches_brute_force(self):
        # independent oracle: numerically optimize the SE(3) alignment and
        # compare the resulting RMSE with the closed-form path
        from scipy.optimize import minimize
        rng = np.random.default_rng(3)
        ref = random_trajectory(rng, n=12)
        offsets = rng.normal(0, 0.3, (12, 3))
        est = Trajectory(ref.timestamps,
                         [Pose(p.q, p.t + o) for p, o in zip(ref.poses, offsets)])
        got = ate(est, ref, alignment="se3")

        src = est.translations()
        dst = ref.translations()

        def cost(x):
            rot = Pose.exp(np.concatenate([np.zeros(3), x[3:]])).rotation_matrix()
            moved = src @ rot.T + x[:3]
            return ((moved - dst) ** 2).sum(axis=1).mean()

        best = np.inf
        for trial in range(8):
            x0 = np.zeros(6) if trial == 0 else rng.normal(0, 0.5, 6)
            res = minimize(cost, x0, method="Nelder-Mead",
                           options={"maxiter": 4000, "xatol": 1e-12, "fatol": 1e-16})
            best = min(best, res.fun)
        assert got == pytest.approx(np.sqrt(best), rel=1e-5)

    def test_straight_line_falls_back_gracefully(self):
        n = 10
        poses = [Pose(np.array([0, 0, 0, 1.0]), np.array([i * 1.0, 0, 0]))
                 for i in range(n)]
        ref = Trajectory(np.arange(n) * 0.1, poses)
        assert ate(ref, ref) == pytest.approx(0.0, abs=1e-12)

    def test_unknown_alignment_rejected(self):
        rng = np.random.default_rng(4)
        traj = random_trajectory(rng)
        with pytest.raises(ValueError):
            ate(traj, traj, alignment="affine")
