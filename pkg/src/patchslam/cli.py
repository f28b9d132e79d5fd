"""Command-line interface.

Subcommands:
  run             full pipeline on a synthetic scene or fixture; writes the
                  estimated trajectory (TUM), ground truth, event log, and the
                  per-frame FPS histogram CSV
  gen-scene       emit a synthetic scene + patch graph fixture file
  eval-ate        absolute trajectory error between two TUM files
  bench-ba        dense vs block-sparse solver timing sweep, CSV output
  export-fixture  run the pipeline and export the final graph state as a fixture

Exit codes: 0 success, 2 configuration/parsing error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import ba
from .errors import ConfigError, ParseError, PatchSlamError
from .pipeline import config_from_mapping, load_config, run, run_repeats
from .synthetic import OracleConfig, SceneSpec, fill_flow, generate, write_scene
from .trajectory import ate as compute_ate, read_tum, write_tum


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _cmd_run(args) -> int:
    config = load_config(args.config, _overrides(args.set))
    results, median = run_repeats(config)
    primary = results[0]
    write_tum(primary.estimate, args.traj, header=f"estimate seed={primary.seed}")
    if args.ref_traj:
        write_tum(primary.reference, args.ref_traj, header="ground truth")
    if args.events:
        with open(args.events, "w") as fh:
            for result in results:
                fh.write(f"# seed {result.seed} ate {result.ate!r}\n")
                for line in result.events:
                    fh.write(line + "\n")
    if args.histogram:
        with open(args.histogram, "w") as fh:
            fh.write("fps,count\n")
            for fps_bin, count in primary.histogram():
                fh.write(f"{fps_bin},{count}\n")
    for result in results:
        print(f"seed {result.seed}: ate {result.ate:.6f} "
              f"closures {len(result.closure_frames)} wall {result.wall_time:.2f}s")
    print(f"median ate over {len(results)} run(s): {median:.6f}")
    return 0


def _cmd_gen_scene(args) -> int:
    mapping = _overrides(args.set)
    config = config_from_mapping(mapping)
    spec = SceneSpec(
        kind=config.scene_kind, n_frames=config.scene_frames,
        seed=config.scene_seed, n_landmarks=config.scene_landmarks,
        extent=config.scene_extent, look=config.scene_look,
        overshoot=config.scene_overshoot)
    scene, graph = generate(spec, config.scene_patches,
                            odometry_radius=config.odometry_radius)
    if args.fill_flow:
        fill_flow(graph, scene, OracleConfig(pixel_noise_sigma=config.oracle_sigma,
                                             outlier_fraction=config.oracle_outliers),
                  seed=config.scene_seed)
    write_scene(scene, graph, args.out)
    print(f"wrote {graph.n_frames} frames, {graph.n_patches} patches, "
          f"{len(graph.edges)} edges to {args.out}")
    return 0


def _cmd_eval_ate(args) -> int:
    estimate = read_tum(args.estimate)
    reference = read_tum(args.reference)
    value = compute_ate(estimate, reference, alignment=args.alignment,
                        gate=args.gate_ms / 1e3)
    print(f"ate[{args.alignment}] = {value:.9f}")
    return 0


def _cmd_bench_ba(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = []
    for n_poses in sizes:
        spec = SceneSpec(kind="circle", n_frames=n_poses + 1, seed=args.seed,
                         n_landmarks=max(1200, 12 * n_poses), look="inward",
                         extent=max(10.0, n_poses / 8.0))
        scene, graph = generate(spec, patches_per_frame=args.patches,
                                odometry_radius=args.radius)
        # long-range loop factors to give the reduced system off-band blocks
        rng = np.random.default_rng(args.seed)
        loops = []
        for _ in range(max(2, n_poses // 60)):
            old = int(rng.integers(0, max(1, n_poses // 4)))
            recent = int(rng.integers(3 * n_poses // 4, n_poses))
            loops.extend((old, k, recent) for k in range(min(args.patches, 32)))
        graph.add_edges(loops, kind="loop")
        fill_flow(graph, scene, OracleConfig())
        problem = ba.BAProblem(graph, (1, n_poses))
        t0 = time.perf_counter()
        system = ba.assemble(problem)
        assemble_ms = (time.perf_counter() - t0) * 1e3
        for backend, solver in ((ba.DENSE, ba.solve_dense),
                                (ba.BLOCK_SPARSE, ba.solve_block_sparse)):
            fact = []
            solv = []
            peak = 0
            for _ in range(args.repeats):
                _, _, stats = solver(system)
                fact.append(stats["factorize_s"] * 1e3)
                solv.append(stats["solve_s"] * 1e3)
                peak = stats["peak_block_count"]
            rows.append((problem.n_free_poses, backend, assemble_ms,
                         float(np.median(fact)), float(np.median(solv)), peak))
    out = sys.stdout if args.out == "-" else open(args.out, "w")
    try:
        out.write("free_poses,backend,assemble_ms,factorize_ms,solve_ms,peak_block_count\n")
        for row in rows:
            out.write("%d,%s,%.3f,%.3f,%.3f,%d\n" % row)
    finally:
        if out is not sys.stdout:
            out.close()
            print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_export_fixture(args) -> int:
    config = load_config(args.config, _overrides(args.set))
    result = run(config)
    write_scene(result.scene, result.graph, args.out)
    if args.traj:
        write_tum(result.estimate, args.traj, header="estimate")
    print(f"ran {len(result.estimate)} frames (ate {result.ate:.6f}); "
          f"fixture written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchslam",
        description="patch-graph SLAM backend: windowed/global BA, loop closure, PGO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--traj", required=True, help="output estimated trajectory (TUM)")
    p.add_argument("--ref-traj", default=None, help="output ground-truth trajectory (TUM)")
    p.add_argument("--events", default=None, help="output event log")
    p.add_argument("--histogram", default=None, help="output FPS histogram CSV")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gen-scene", help="emit a synthetic scene fixture")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--fill-flow", action="store_true",
                   help="also write oracle flow targets into the edges")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("eval-ate", help="ATE between two TUM trajectories")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--alignment", choices=("sim3", "se3"), default="sim3")
    p.add_argument("--gate-ms", type=float, default=20.0)
    p.set_defaults(func=_cmd_eval_ate)

    p = sub.add_parser("bench-ba", help="dense vs block-sparse timing sweep")
    p.add_argument("--sizes", default="10,50,100,300,500",
                   help="comma-separated free-pose counts")
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--radius", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_bench_ba)

    p = sub.add_parser("export-fixture", help="run and export the final graph state")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--traj", default=None)
    p.set_defaults(func=_cmd_export_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PatchSlamError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
