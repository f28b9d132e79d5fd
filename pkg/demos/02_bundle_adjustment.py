"""Bundle adjustment on a synthetic scene: perturb the poses, watch the
confidence-weighted reprojection objective collapse back to ground truth."""

import numpy as np

from patchslam import ba
from patchslam.drift import umeyama
from patchslam.geometry import Pose
from patchslam.synthetic import OracleConfig, SceneSpec, fill_flow, generate

rng = np.random.default_rng(1)

spec = SceneSpec(kind="circle", n_frames=25, seed=3, n_landmarks=3000, look="inward")
scene, graph = generate(spec, patches_per_frame=32, odometry_radius=6)
fill_flow(graph, scene, OracleConfig())          # noiseless flow oracle
print(f"scene: {graph.n_frames} frames, {graph.n_patches} patches, "
      f"{len(graph.edges)} edges")

gt_centers = np.stack([p.t for p in scene.gt_poses])
for f in graph.frames[1:]:
    f.pose = Pose.exp(rng.normal(0, 0.05, 6)) * f.pose

problem = ba.BAProblem(graph, (1, graph.n_frames - 1))
print(f"objective after perturbation: {ba.objective(problem):.4e}")

report = ba.solve(problem, max_iterations=20, tolerance=1e-12)
print(f"solved in {report.iterations} iterations with the {report.backend} backend")
print(f"objective: {report.initial_objective:.4e} -> {report.final_objective:.4e}")

est = np.stack([f.pose.t for f in graph.frames])
align = umeyama(est, gt_centers)   # monocular gauge: similarity alignment
rmse = np.sqrt(((align.act(est) - gt_centers) ** 2).sum(axis=1).mean())
print(f"gauge-aligned position RMSE: {rmse:.2e}")

# the same assembled system solved by both backends gives the same update
system = ba.assemble(problem)
dp_dense, _, stats_d = ba.solve_dense(system)
dp_sparse, _, stats_s = ba.solve_block_sparse(system)
print(f"backend agreement: {np.abs(dp_dense - dp_sparse).max():.2e}")
print(f"reduced camera matrix blocks: dense {stats_d['peak_block_count']}, "
      f"block-sparse {stats_s['peak_block_count']}")
