import numpy as np
import pytest

from patchslam.geometry import Intrinsics
from patchslam.synthetic import OracleConfig, SceneSpec, fill_flow, generate

STANDARD_INTRINSICS = Intrinsics(320.0, 320.0, 256.0, 192.0)


@pytest.fixture(scope="session")
def small_scene():
    """Well-conditioned inward-looking arc: 12 frames, 20 patches, radius 4."""
    spec = SceneSpec(kind="circle", n_frames=12, seed=5, n_landmarks=1500, look="inward")
    scene, graph = generate(spec, patches_per_frame=20, odometry_radius=4)
    fill_flow(graph, scene, OracleConfig())
    return scene, graph


@pytest.fixture(scope="session")
def overlap_scene():
    """Small landmark pool so nearby frames share patches (for edge flips)."""
    spec = SceneSpec(kind="circle", n_frames=8, seed=2, n_landmarks=130, look="inward")
    scene, graph = generate(spec, patches_per_frame=26, odometry_radius=3)
    fill_flow(graph, scene, OracleConfig())
    return scene, graph


def perturb_poses(graph, sigma, seed, first=1):
    from patchslam.geometry import Pose
    rng = np.random.default_rng(seed)
    for f in graph.frames[first:]:
        f.pose = Pose.exp(rng.normal(0, sigma, 6)) * f.pose


def gauge_aligned_rmse(graph, gt_poses):
    from patchslam.drift import umeyama
    est = np.stack([f.pose.t for f in graph.frames])
    ref = np.stack([p.t for p in gt_poses])
    transform = umeyama(est, ref)
    return float(np.sqrt(((transform.act(est) - ref) ** 2).sum(axis=1).mean()))
