"""Classical loop closure path: a chain whose odometry systematically
mis-scales 1% per step, one scale-aware loop measurement, and the Sim(3)
pose graph that distributes the correction along the whole trajectory."""

import numpy as np

from patchslam.geometry import Pose, Similarity, sim3_exp
from patchslam.posegraph import PoseGraphProblem, optimize, residual_loop

rng = np.random.default_rng(3)
n = 100

# ground truth: every relative step carries a planted 1% scale drift
deltas = []
chain = [Similarity.identity()]
for _ in range(n - 1):
    tangent = np.concatenate([rng.normal(0, 0.25, 3), rng.normal(0, 0.15, 3),
                              [np.log(1.01)]])
    deltas.append(sim3_exp(tangent))
    chain.append(chain[-1] * deltas[-1])

# the loop measurement closes the chain exactly (in Sim(3), scale included)
loop = (0, n - 1, chain[n - 1].inverse() * chain[0])

# pose estimates only carry (t, R): converted to similarities at scale 1
init = [Similarity.from_pose(Pose(s.q, s.t)) for s in chain]
problem = PoseGraphProblem(init, deltas, [loop])

print(f"objective before: {sum((residual_loop(problem, (0, n - 1)) ** 2)):.3f} (loop term)")
report = optimize(problem, max_iterations=100)
print(f"optimized in {report.iterations} iterations, "
      f"objective {report.initial_objective:.3e} -> {report.final_objective:.3e}")
print(f"loop residual norm: {np.linalg.norm(residual_loop(problem, (0, n - 1))):.2e}")

scales = report.scale_corrections
print("scale corrections along the chain (every 10th node):")
print("  " + " ".join(f"{s:.3f}" for s in scales[::10]))
print(f"expected geometric spread: 1.01^99 = {1.01 ** 99:.3f}, got {scales[-1]:.3f}")
print("after the update rule, each keyframe's inverse depths are divided by")
print("its node scale, which leaves every reprojection residual unchanged.")
