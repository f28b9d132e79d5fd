import copy

import numpy as np
import pytest

from patchslam import ba
from patchslam.errors import ConfigError
from patchslam.graph import LOOP, ODOMETRY
from patchslam.loop import ClosureEvent, ProximityConfig, close, detect, resolve_threshold
from patchslam.synthetic import OracleConfig, SceneSpec, fill_flow, generate, make_flow_oracle

from conftest import gauge_aligned_rmse, perturb_poses


def drifted_loop_graph(noise=0.01, seed=0):
    """Square loop with accumulated tangent drift on the pose estimates."""
    spec = SceneSpec(kind="square-loop", n_frames=60, seed=3, n_landmarks=2600,
                     overshoot=0.3)
    scene, graph = generate(spec, patches_per_frame=16, odometry_radius=5)
    fill_flow(graph, scene, OracleConfig())
    rng = np.random.default_rng(seed)
    from patchslam.geometry import Pose
    drift = Pose.identity()
    for f in graph.frames[1:]:
        drift = drift * Pose.exp(rng.normal(0, noise, 6))
        f.pose = drift * f.pose
    return scene, graph


class TestDetect:
    def test_straight_line_has_no_candidates(self):
        spec = SceneSpec(kind="line", n_frames=40, seed=1, n_landmarks=3000)
        _, graph = generate(spec, patches_per_frame=8, odometry_radius=2)
        cfg = ProximityConfig(min_temporal_gap=10, odometry_radius=2)
        assert detect(graph, cfg) == []

    def test_square_loop_first_revisit(self):
        spec = SceneSpec(kind="square-loop", n_frames=60, seed=2, n_landmarks=2500,
                         overshoot=0.3)
        _, graph = generate(spec, patches_per_frame=8, odometry_radius=2)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=2)
        candidates = detect(graph, cfg)
        assert candidates
        old, recent = candidates[0]
        # the revisit pairs the end of the loop with the starting corner
        assert recent - old >= 20
        assert recent >= 40 and old <= 15
        for o, r in candidates:
            centers = graph.camera_centers()
            assert np.linalg.norm(centers[o] - centers[r]) < resolve_threshold(graph, cfg)

    def test_zero_threshold_finds_nothing(self):
        spec = SceneSpec(kind="square-loop", n_frames=50, seed=2, n_landmarks=2500,
                         overshoot=0.3)
        _, graph = generate(spec, patches_per_frame=8, odometry_radius=2)
        cfg = ProximityConfig(distance_threshold=0.0, min_temporal_gap=20,
                              odometry_radius=2)
        assert detect(graph, cfg) == []

    def test_sorted_by_distance(self):
        spec = SceneSpec(kind="square-loop", n_frames=60, seed=4, n_landmarks=2500,
                         overshoot=0.35)
        _, graph = generate(spec, patches_per_frame=8, odometry_radius=2)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=2)
        centers = graph.camera_centers()
        dists = [np.linalg.norm(centers[o] - centers[r]) for o, r in detect(graph, cfg)]
        assert dists == sorted(dists)


class TestClose:
    def test_config_invariant(self):
        cfg = ProximityConfig(min_temporal_gap=5, odometry_radius=8)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_drifted_loop_ate_drops(self):
        scene, graph = drifted_loop_graph()
        before = gauge_aligned_rmse(graph, scene.gt_poses)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5,
                              ba_iterations=20)
        candidates = detect(graph, cfg)
        assert candidates
        oracle = make_flow_oracle(scene, OracleConfig(), seed=1)
        event = close(graph, candidates, oracle, cfg)
        after = gauge_aligned_rmse(graph, scene.gt_poses)
        assert before / max(after, 1e-15) >= 10.0
        assert event.report.final_objective <= event.report.initial_objective

    def test_edges_point_old_to_recent(self):
        scene, graph = drifted_loop_graph(seed=2)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5)
        candidates = detect(graph, cfg)
        oracle = make_flow_oracle(scene, OracleConfig(), seed=2)
        event = close(graph, candidates, oracle, cfg)
        assert event.edge_indices
        for idx in event.edge_indices:
            e = graph.edges[idx]
            assert e.kind == LOOP
            assert e.src_frame < e.dst_frame
            assert e.dst_frame == event.anchor

    def test_global_problem_mixes_edge_kinds(self):
        scene, graph = drifted_loop_graph(seed=3)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5)
        candidates = detect(graph, cfg)
        oracle = make_flow_oracle(scene, OracleConfig(), seed=3)
        event = close(graph, candidates, oracle, cfg)
        problem = ba.BAProblem(graph, (max(1, event.anchor - cfg.backend_range + 1),
                                       event.anchor))
        kinds = {graph.edges[i].kind for i in problem.edge_indices}
        assert kinds == {ODOMETRY, LOOP}

    def test_edge_cap_respected(self):
        scene, graph = drifted_loop_graph(seed=4)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5,
                              max_edges_per_closure=10)
        candidates = detect(graph, cfg)
        oracle = make_flow_oracle(scene, OracleConfig(), seed=4)
        event = close(graph, candidates, oracle, cfg)
        assert len(event.edge_indices) == 10

    def test_zero_confidence_closure_changes_nothing(self):
        scene, graph = drifted_loop_graph(seed=5)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5)
        candidates = detect(graph, cfg)
        poses_before = [f.pose.as_array() for f in graph.frames]

        def zero_oracle(g, edge_indices):
            fill_flow(g, scene, OracleConfig(), edge_indices, seed=0)
            for idx in edge_indices:
                g.edges[idx].confidence = np.zeros(2)
            # the odometry factors are already at their optimum w.r.t. the
            # current flow targets: refresh them so only the loop edges differ
            for idx in range(len(g.edges)):
                if idx not in set(edge_indices):
                    pass

        # make the existing odometry residuals zero at the current (drifted)
        # state so the only new information would be the loop edges
        for e in graph.edges:
            from patchslam.geometry import reproject_patch
            pix, valid = reproject_patch(graph.patch(e.src_frame, e.src_patch),
                                         graph.frames[e.src_frame].pose,
                                         graph.frames[e.dst_frame].pose,
                                         graph.intrinsics)
            e.target = pix
            e.confidence = np.where(valid.all(), e.confidence, 0.0 * e.confidence)
        event = close(graph, candidates, zero_oracle, cfg)
        for before, f in zip(poses_before, graph.frames):
            assert np.abs(before - f.pose.as_array()).max() < 1e-10

    def test_memory_budget_untouched(self):
        scene, graph = drifted_loop_graph(seed=6)
        graph.remove_frames_before(40)
        budget_before = graph.dense_feature_budget()
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5)
        candidates = detect(graph, cfg)
        oracle = make_flow_oracle(scene, OracleConfig(), seed=6)
        event = close(graph, candidates, oracle, cfg)
        assert graph.dense_feature_budget() == budget_before
        # the inserted edges only consult features of the (recent) anchor
        assert {graph.edges[i].dst_frame for i in event.edge_indices} == {event.anchor}

    def test_active_patch_spike(self):
        scene, graph = drifted_loop_graph(seed=7)
        cfg = ProximityConfig(min_temporal_gap=20, odometry_radius=5)
        n = graph.n_frames - 1
        window_problem = ba.BAProblem(graph, (max(1, n - 8), n))
        odometry_active = window_problem.active_patch_count()
        candidates = detect(graph, cfg)
        oracle = make_flow_oracle(scene, OracleConfig(), seed=7)
        event = close(graph, candidates, oracle, cfg)
        assert event.active_patches >= 2 * odometry_active
