"""Dense vs block-sparse factorization of the reduced camera matrix as the
pose count grows; writes a CSV you can plot with any tool."""

import time

import numpy as np

from patchslam import ba
from patchslam.synthetic import OracleConfig, SceneSpec, fill_flow, generate

SIZES = [10, 25, 50, 100, 200, 400]
OUT = "solver_scaling.csv"

rows = []
for n_poses in SIZES:
    spec = SceneSpec(kind="circle", n_frames=n_poses + 1, seed=0,
                     n_landmarks=max(1200, 10 * n_poses), look="inward",
                     extent=max(10.0, n_poses / 8.0))
    scene, graph = generate(spec, patches_per_frame=12, odometry_radius=4)
    # a few long-range loop factors make the problem realistically sparse
    rng = np.random.default_rng(0)
    loops = []
    for _ in range(max(2, n_poses // 60)):
        old = int(rng.integers(0, max(1, n_poses // 4)))
        recent = int(rng.integers(3 * n_poses // 4, n_poses))
        loops.extend((old, k, recent) for k in range(12))
    graph.add_edges(loops, kind="loop")
    fill_flow(graph, scene, OracleConfig())

    problem = ba.BAProblem(graph, (1, n_poses))
    system = ba.assemble(problem)
    timings = {}
    for backend, solver in ((ba.DENSE, ba.solve_dense),
                            (ba.BLOCK_SPARSE, ba.solve_block_sparse)):
        samples = []
        for _ in range(3):
            t0 = time.perf_counter()
            solver(system)
            samples.append(time.perf_counter() - t0)
        timings[backend] = float(np.median(samples)) * 1e3
    chosen = ba.select_backend(problem)
    rows.append((n_poses, timings[ba.DENSE], timings[ba.BLOCK_SPARSE], chosen))
    print(f"{n_poses:4d} poses: dense {timings[ba.DENSE]:8.2f} ms | "
          f"block-sparse {timings[ba.BLOCK_SPARSE]:8.2f} ms | selected: {chosen}")

with open(OUT, "w") as fh:
    fh.write("free_poses,dense_ms,block_sparse_ms,selected\n")
    for row in rows:
        fh.write("%d,%.3f,%.3f,%s\n" % row)
print(f"\nwrote {OUT}")
