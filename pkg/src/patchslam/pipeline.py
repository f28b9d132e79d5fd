"""End-to-end runs: streaming odometry over a synthetic scene with windowed
bundle adjustment, proximity loop closure on the shared graph, and an
optional classical backend (drift estimation + pose-graph optimization) on a
worker thread.

Configuration is a flat ``key = value`` text file (``#`` comments).  Unknown
keys are rejected; CLI flags override file keys.  All randomness derives from
the per-run seed, and worker results are applied at a fixed frame barrier, so
a run is bit-reproducible for a fixed config and seed.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import ba
from .drift import ConsecutiveDetectionGate, estimate_drift
from .errors import (
    ConfigError,
    InfeasibleVisibility,
    InsufficientParallax,
    NoConsensus,
)
from .geometry import Pose, Similarity
from .graph import PatchGraph
from .loop import ProximityConfig, close as proximity_close, detect as proximity_detect
from .posegraph import PoseGraphProblem, apply_corrections, optimize
from .synthetic import (
    OracleConfig,
    SceneSpec,
    SyntheticScene,
    generate,
    make_flow_oracle,
    read_scene,
)
from .trajectory import Trajectory, ate


@dataclass
class RunConfig:
    scene_kind: str = "square-loop"
    scene_frames: int = 120
    scene_seed: int = 0
    scene_landmarks: int = 3000
    scene_extent: float = 10.0
    scene_look: str = "forward"
    scene_patches: int = 48
    scene_overshoot: float = 0.15
    fixture: str = ""

    odometry_radius: int = 8
    odometry_window: int = 10
    odometry_iterations: int = 2
    odometry_init_noise: float = 0.02

    oracle_sigma: float = 0.3
    oracle_outliers: float = 0.0
    oracle_outlier_magnitude: float = 40.0
    oracle_w_low: float = 0.05

    proximity_enabled: bool = True
    proximity_threshold: float = -1.0          # <= 0: auto (2x median spacing)
    proximity_gap: int = 30
    proximity_max_edges: int = 288
    proximity_backend_range: int = 1000
    proximity_iterations: int = 8

    classical_enabled: bool = False
    classical_gap: int = 30
    classical_min_common: int = 40
    classical_region_width: int = 5
    classical_required: int = 2
    classical_apply_lag: int = 8
    classical_stall_bound: float = 2.0
    classical_points: int = 120
    classical_outliers: float = 0.0
    classical_min_inliers: int = 12
    classical_min_ratio: float = 0.75
    classical_inlier_threshold: float = -1.0   # <= 0: default (2% of cloud radius)
    classical_pgo_iterations: int = 30

    solver_threshold: int = 48
    memory_slack: int = 3
    final_iterations: int = 8      # terminate-step global BA over the backend range
    seeds: tuple[int, ...] = (0,)
    ate_alignment: str = "sim3"

    def validate(self) -> None:
        if self.proximity_enabled and self.proximity_gap <= self.odometry_radius:
            raise ConfigError("proximity.gap must exceed odometry.radius")
        if self.odometry_window < 2:
            raise ConfigError("odometry.window must be at least 2")
        if self.proximity_backend_range < self.odometry_window:
            raise ConfigError("proximity.backend_range must cover the odometry window")
        if self.ate_alignment not in ("sim3", "se3"):
            raise ConfigError("ate.alignment must be sim3 or se3")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")


# file key -> (attribute, parser)
def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_seeds(v: str) -> tuple[int, ...]:
    return tuple(int(s) for s in v.replace(",", " ").split())


CONFIG_KEYS = {
    "scene.kind": ("scene_kind", str),
    "scene.frames": ("scene_frames", int),
    "scene.seed": ("scene_seed", int),
    "scene.landmarks": ("scene_landmarks", int),
    "scene.extent": ("scene_extent", float),
    "scene.look": ("scene_look", str),
    "scene.patches": ("scene_patches", int),
    "scene.overshoot": ("scene_overshoot", float),
    "fixture": ("fixture", str),
    "odometry.radius": ("odometry_radius", int),
    "odometry.window": ("odometry_window", int),
    "odometry.iterations": ("odometry_iterations", int),
    "odometry.init_noise": ("odometry_init_noise", float),
    "oracle.sigma": ("oracle_sigma", float),
    "oracle.outliers": ("oracle_outliers", float),
    "oracle.outlier_magnitude": ("oracle_outlier_magnitude", float),
    "oracle.w_low": ("oracle_w_low", float),
    "proximity.enabled": ("proximity_enabled", _parse_bool),
    "proximity.threshold": ("proximity_threshold", float),
    "proximity.gap": ("proximity_gap", int),
    "proximity.max_edges": ("proximity_max_edges", int),
    "proximity.backend_range": ("proximity_backend_range", int),
    "proximity.iterations": ("proximity_iterations", int),
    "classical.enabled": ("classical_enabled", _parse_bool),
    "classical.gap": ("classical_gap", int),
    "classical.min_common": ("classical_min_common", int),
    "classical.region_width": ("classical_region_width", int),
    "classical.required": ("classical_required", int),
    "classical.apply_lag": ("classical_apply_lag", int),
    "classical.stall_bound": ("classical_stall_bound", float),
    "classical.points": ("classical_points", int),
    "classical.outliers": ("classical_outliers", float),
    "classical.min_inliers": ("classical_min_inliers", int),
    "classical.min_ratio": ("classical_min_ratio", float),
    "classical.inlier_threshold": ("classical_inlier_threshold", float),
    "classical.pgo_iterations": ("classical_pgo_iterations", int),
    "solver.threshold": ("solver_threshold", int),
    "memory.slack": ("memory_slack", int),
    "run.final_iterations": ("final_iterations", int),
    "run.seeds": ("seeds", _parse_seeds),
    "ate.alignment": ("ate_alignment", str),
}


def parse_config_text(lines, path: str | None = None) -> dict[str, str]:
    out = {}
    for ln, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path or '<config>'}:{ln}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path or '<config>'}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_mapping(mapping: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for key, value in mapping.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parser = CONFIG_KEYS[key]
        try:
            setattr(cfg, attr, parser(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    mapping = {}
    if path is not None:
        with open(path) as fh:
            mapping = parse_config_text(fh, str(path))
    if overrides:
        mapping.update(overrides)
    return config_from_mapping(mapping)


# ---------------------------------------------------------------------------
# Run results.


@dataclass
class RunResult:
    seed: int
    estimate: Trajectory
    reference: Trajectory
    events: list[str]
    frame_times: np.ndarray
    ate: float
    closure_frames: list[int] = field(default_factory=list)
    budget_series: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    active_series: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    worker_frames: list[int] = field(default_factory=list)
    max_stall_while_worker: float = 0.0
    wall_time: float = 0.0
    graph: PatchGraph | None = None
    scene: SyntheticScene | None = None

    def histogram(self, max_fps: int = 200) -> list[tuple[int, int]]:
        """Per-frame speed histogram in 1-FPS-wide bins."""
        fps = np.minimum(1.0 / np.maximum(self.frame_times, 1e-9), max_fps)
        bins = np.bincount(fps.astype(int), minlength=max_fps + 1)
        return [(b, int(c)) for b, c in enumerate(bins) if c]


class _ClassicalWorker:
    """One in-flight drift-estimation + PGO job on a daemon thread."""

    def __init__(self):
        self.queue: queue.Queue = queue.Queue()
        self.thread: threading.Thread | None = None
        self.launched_at = -1

    @property
    def busy(self) -> bool:
        return self.thread is not None and self.thread.is_alive()

    def launch(self, fn, frame: int) -> None:
        self.launched_at = frame
        self.thread = threading.Thread(target=fn, daemon=True)
        self.thread.start()

    def collect(self, block: bool) -> tuple | None:
        if self.thread is None:
            return None
        if block:
            self.thread.join()
        if self.thread.is_alive():
            return None
        self.thread = None
        try:
            return self.queue.get_nowait()
        except queue.Empty:
            return None


def _scene_for(config: RunConfig):
    if config.fixture:
        scene, graph = read_scene(config.fixture)
        # the fixture's edges belong to its recording; the run rebuilds its own
        graph.edges = []
        return scene, graph
    spec = SceneSpec(
        kind=config.scene_kind,
        n_frames=config.scene_frames,
        seed=config.scene_seed,
        n_landmarks=config.scene_landmarks,
        extent=config.scene_extent,
        look=config.scene_look,
        overshoot=config.scene_overshoot,
    )
    return generate(spec, config.scene_patches, odometry_radius=0)


def run(config: RunConfig, seed: int | None = None) -> RunResult:
    """Process every frame of the scene through the full pipeline."""
    config.validate()
    seed = config.seeds[0] if seed is None else seed
    scene, graph = _scene_for(config)
    n_frames = graph.n_frames
    intr = graph.intrinsics

    oracle_cfg = OracleConfig(
        pixel_noise_sigma=config.oracle_sigma,
        outlier_fraction=config.oracle_outliers,
        outlier_magnitude=config.oracle_outlier_magnitude,
        low_confidence=config.oracle_w_low,
    )
    oracle = make_flow_oracle(scene, oracle_cfg, seed=seed + 1)
    noise_rng = np.random.default_rng(seed + 2)

    # frames stream in one at a time: dense features exist only once processed
    for frame in graph.frames:
        frame.has_dense_features = False

    prox_cfg = ProximityConfig(
        distance_threshold=None if config.proximity_threshold <= 0 else config.proximity_threshold,
        min_temporal_gap=config.proximity_gap,
        max_edges_per_closure=config.proximity_max_edges,
        backend_range=config.proximity_backend_range,
        odometry_radius=config.odometry_radius,
        ba_iterations=config.proximity_iterations,
        backend_threshold=config.solver_threshold,
    )
    if config.proximity_enabled:
        prox_cfg.validate()

    gate = ConsecutiveDetectionGate(config.classical_region_width, config.classical_required)
    worker = _ClassicalWorker()
    accepted_loops: list[tuple[int, int, Similarity]] = []
    vis_sets = None
    if config.classical_enabled:
        vis_sets = [set(scene.visible_landmarks(f)) for f in range(n_frames)]

    events: list[str] = []
    frame_times = np.zeros(n_frames)
    budget_series = np.zeros(n_frames, dtype=int)
    active_series = np.zeros(n_frames, dtype=int)
    closure_frames: list[int] = []
    worker_frames: list[int] = []
    max_stall = 0.0
    last_closure = -(10 ** 9)
    last_classical = -(10 ** 9)

    def classical_job(pair, snapshot, frame):
        j, k = pair
        try:
            from .synthetic import synthetic_loop_candidate
            candidate = synthetic_loop_candidate(
                scene, j, k, max_points=config.classical_points,
                outlier_fraction=config.classical_outliers,
                seed=seed + 31 * frame + 7, newest=frame)
            threshold = (config.classical_inlier_threshold
                         if config.classical_inlier_threshold > 0 else None)
            est = estimate_drift(candidate, snapshot, intr,
                                 seed=seed + 13 * frame + 3,
                                 min_inliers=config.classical_min_inliers,
                                 inlier_threshold=threshold)
            if est.inlier_ratio < config.classical_min_ratio:
                raise NoConsensus(
                    f"inlier ratio {est.inlier_ratio:.2f} below "
                    f"{config.classical_min_ratio}")
            loops = accepted_loops + [(j, k, est.transform)]
            problem = PoseGraphProblem.from_poses(snapshot, loops)
            report = optimize(problem, max_iterations=config.classical_pgo_iterations)
            worker.queue.put((frame, pair, est, problem.nodes, report))
        except (NoConsensus, InsufficientParallax, InfeasibleVisibility) as exc:
            worker.queue.put((frame, pair, exc, None, None))

    wall0 = time.perf_counter()
    for n in range(n_frames):
        tic = time.perf_counter()
        worker_live = worker.busy

        # apply a finished classical result at its deterministic barrier
        if config.classical_enabled and worker.launched_at >= 0 and \
                n >= worker.launched_at + config.classical_apply_lag:
            result = worker.collect(block=True)
            if result is not None:
                rframe, pair, est, nodes, pgo_report = result
                if nodes is None:
                    events.append(f"classical frame={n} pair={pair} rejected={est}")
                else:
                    accepted_loops.append((pair[0], pair[1], est.transform))
                    apply_corrections(graph, nodes)
                    events.append(
                        f"classical frame={n} pair={pair} inliers={est.inlier_count} "
                        f"scale={est.transform.s:.6f} pgo_obj={pgo_report.final_objective:.3e}")
            worker.launched_at = -1

        graph.frames[n].has_dense_features = True

        # odometry step: motion-model initialization + local window BA
        if n > 0:
            rel = scene.gt_poses[n - 1].inverse() * scene.gt_poses[n]
            init = graph.frames[n - 1].pose * rel
            if config.odometry_init_noise > 0:
                init = Pose.exp(noise_rng.normal(0, config.odometry_init_noise, 6)) * init
            graph.frames[n].pose = init
        new_edges = graph.connect_frame(n, config.odometry_radius)
        oracle(graph, new_edges)

        kind = "odometry"
        active = 0
        if n >= 1:
            lo = max(1, n - config.odometry_window + 1)
            problem = ba.BAProblem(graph, (lo, n))
            ba.solve(problem, max_iterations=config.odometry_iterations,
                     tolerance=1e-12, backend_threshold=config.solver_threshold)
            active = problem.active_patch_count()

        if config.proximity_enabled and n - last_closure >= config.proximity_gap:
            candidates = [(o, r) for o, r in
                          proximity_detect(graph, prox_cfg, newest=n) if r == n]
            if candidates:
                event = proximity_close(graph, candidates, oracle, prox_cfg)
                last_closure = n
                kind = "closure"
                active = event.active_patches
                closure_frames.append(n)
                ba_ms = 1e3 * sum(event.report.iteration_times)
                events.append(
                    f"closure frame={n} anchor={event.anchor} "
                    f"matched={','.join(str(m) for m in event.matched)} "
                    f"edges={len(event.edge_indices)} ba_ms={ba_ms:.1f} "
                    f"objective={event.report.final_objective:.4e}")

        # classical detection via the retrieval stand-in; retrieval returns
        # the strongest match (most shared landmarks), like image retrieval
        # returning the most similar frame
        if config.classical_enabled:
            pairs = []
            for j in range(0, n - config.classical_gap + 1):
                common = len(vis_sets[j] & vis_sets[n])
                if common >= config.classical_min_common:
                    pairs.append((common, j, n))
            pairs.sort(reverse=True)
            accepted = gate.update(n, [(j, k) for _, j, k in pairs[:1]])
            # launch gating is frame-based (one job until its barrier) so the
            # schedule never depends on wall-clock thread state
            if accepted and worker.launched_at < 0 and \
                    n - last_classical >= config.classical_gap:
                last_classical = n
                snapshot = graph.snapshot_poses()
                pair = accepted[0]
                worker.launch(lambda p=pair, s=snapshot, f=n: classical_job(p, s, f), n)
                events.append(f"classical_launch frame={n} pair={pair}")

        graph.remove_frames_before(n - config.odometry_window - config.memory_slack + 1)
        budget_series[n] = graph.dense_feature_budget()
        active_series[n] = active

        dt = time.perf_counter() - tic
        frame_times[n] = dt
        if worker_live or worker.busy:
            worker_frames.append(n)
            # stalls are measured on odometry frames: closure frames are slow
            # because of their own global solve, not because of the worker
            if kind == "odometry":
                max_stall = max(max_stall, dt)
        events.append(
            f"frame idx={n} ms={dt * 1e3:.3f} kind={kind} active={active} "
            f"budget={budget_series[n]}")

    # drain any still-pending classical result deterministically
    if config.classical_enabled and worker.launched_at >= 0:
        result = worker.collect(block=True)
        if result is not None:
            rframe, pair, est, nodes, pgo_report = result
            if nodes is not None:
                accepted_loops.append((pair[0], pair[1], est.transform))
                apply_corrections(graph, nodes)
                events.append(
                    f"classical frame=end pair={pair} inliers={est.inlier_count} "
                    f"scale={est.transform.s:.6f} pgo_obj={pgo_report.final_objective:.3e}")
            else:
                events.append(f"classical frame=end pair={pair} rejected={est}")

    # terminate step of the loop-closure backend: one global refinement over
    # the backend range, pulling all loop factors into a final joint solve.
    # Odometry-only runs stay pure sliding-window.
    if config.proximity_enabled and config.final_iterations > 0 and n_frames >= 3:
        tic = time.perf_counter()
        lo = max(1, n_frames - config.proximity_backend_range)
        problem = ba.BAProblem(graph, (lo, n_frames - 1))
        report = ba.solve(problem, max_iterations=config.final_iterations,
                          tolerance=1e-12, backend_threshold=config.solver_threshold)
        events.append(
            f"terminate ms={(time.perf_counter() - tic) * 1e3:.1f} "
            f"objective={report.final_objective:.4e} backend={report.backend}")

    wall = time.perf_counter() - wall0
    timestamps = np.array([f.timestamp for f in graph.frames])
    estimate = Trajectory(timestamps, [f.pose for f in graph.frames])
    reference = Trajectory(timestamps, list(scene.gt_poses))
    error = ate(estimate, reference, alignment=config.ate_alignment)

    return RunResult(
        seed=seed, estimate=estimate, reference=reference, events=events,
        frame_times=frame_times, ate=error, closure_frames=closure_frames,
        budget_series=budget_series, active_series=active_series,
        worker_frames=worker_frames, max_stall_while_worker=max_stall,
        wall_time=wall, graph=graph, scene=scene)


def run_repeats(config: RunConfig) -> tuple[list[RunResult], float]:
    """Run once per configured seed; reports the median ATE (5-run protocol)."""
    results = [run(config, seed) for seed in config.seeds]
    median = float(np.median([r.ate for r in results]))
    return results, median
