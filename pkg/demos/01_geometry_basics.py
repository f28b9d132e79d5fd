"""Tour of the transform types: composition, exp/log round trips, and the
patch reprojection kernel that every optimizer in the package shares."""

import numpy as np

from patchslam.geometry import (
    Intrinsics,
    Patch,
    Pose,
    Similarity,
    reproject_patch,
    sim3_exp,
    sim3_log,
)

rng = np.random.default_rng(0)
intr = Intrinsics(320.0, 320.0, 256.0, 192.0)

print("== rigid transforms ==")
pose = Pose.exp(np.array([0.1, -0.2, 0.3, 0.05, 0.1, -0.02]))
print("pose:", pose)
print("log(exp(xi)) drift:", np.abs(Pose.exp(pose.log()).log() - pose.log()).max())
print("compose with inverse:", np.linalg.norm((pose * pose.inverse()).log()))

print("\n== similarities ==")
tangent = np.array([0.4, 0.0, -0.1, 0.0, 0.2, 0.0, np.log(1.5)])
sim = sim3_exp(tangent)
print("sim with scale", sim.s)
print("round trip error:", np.abs(sim3_log(sim) - tangent).max())
point = np.array([1.0, 2.0, 3.0])
print("action s*R@x + t:", sim.act(point))
print("scale-1 similarity matches the pose action:",
      np.allclose(Similarity.from_pose(pose).act(point), pose.act(point)))

print("\n== patch reprojection ==")
patch = Patch.square(0, np.array([300.0, 200.0]), inverse_depth=0.25)
target_cam = Pose.exp(np.array([0.3, 0.0, 0.1, 0.0, 0.05, 0.0]))
pixels, valid = reproject_patch(patch, Pose.identity(), target_cam, intr)
print("grid center", patch.center, "->", pixels.mean(axis=0), "valid:", valid.all())

print("\n== monocular scale ambiguity ==")
# scaling translation and inverse depth together leaves reprojections fixed
scaled = Patch.square(0, np.array([300.0, 200.0]), inverse_depth=0.25 / 2.0)
double = Pose(target_cam.q, 2.0 * target_cam.t)
pixels2, _ = reproject_patch(scaled, Pose.identity(), double, intr)
print("max pixel shift under a global rescale:", np.abs(pixels2 - pixels).max())
