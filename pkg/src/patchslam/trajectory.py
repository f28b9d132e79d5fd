"""Timestamped trajectories, TUM-format I/O, and absolute trajectory error.

TUM format: one record per line, ``timestamp tx ty tz qx qy qz qw``,
space-separated, ``#`` starts a comment.  Floats are written with repr
precision so an export/import round trip is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .drift import umeyama
from .errors import DegenerateConfiguration, NoAssociations, ParseError
from .geometry import Pose

ASSOCIATION_GATE = 0.02   # seconds


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def translations(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.t for p in self.poses])


def write_tum(trajectory: Trajectory, path, header: str | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        if header:
            fh.write(f"# {header}\n")
        for ts, pose in zip(trajectory.timestamps, trajectory.poses):
            vals = [ts, *pose.t, *pose.q]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_tum(path) -> Trajectory:
    timestamps = []
    poses = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 8:
                raise ParseError(f"expected 8 fields, got {len(tok)}", str(path), ln)
            try:
                vals = [float(v) for v in tok]
            except ValueError as exc:
                raise ParseError(f"non-numeric field: {exc}", str(path), ln) from exc
            q = np.array(vals[4:8])
            norm = np.linalg.norm(q)
            if norm <= 0:
                raise ParseError("zero quaternion", str(path), ln)
            if abs(norm - 1.0) > 1e-3:
                warnings.warn(
                    f"{path}:{ln}: quaternion norm {norm:.6f} deviates from 1; normalizing")
            timestamps.append(vals[0])
            poses.append(Pose(q, vals[1:4]))   # Pose renormalizes any deviation
    return Trajectory(np.array(timestamps), poses)


def associate(estimate: Trajectory, reference: Trajectory,
              gate: float = ASSOCIATION_GATE):
    """Greedy nearest-timestamp association within the gate (seconds)."""
    pairs = []
    j = 0
    used = set()
    for i, ts in enumerate(estimate.timestamps):
        while j + 1 < len(reference) and abs(reference.timestamps[j + 1] - ts) <= \
                abs(reference.timestamps[j] - ts):
            j += 1
        if j < len(reference) and abs(reference.timestamps[j] - ts) <= gate and j not in used:
            pairs.append((i, j))
            used.add(j)
    if not pairs:
        raise NoAssociations(
            f"no timestamp pairs within {gate}s between {len(estimate)} and "
            f"{len(reference)} poses")
    idx = np.array(pairs, dtype=int)
    return idx[:, 0], idx[:, 1]


def ate(estimate: Trajectory, reference: Trajectory, alignment: str = "sim3",
        gate: float = ASSOCIATION_GATE) -> float:
    """RMSE of translational error after closed-form trajectory alignment.

    ``alignment`` is "sim3" (default, monocular) or "se3".  Degenerate
    geometry (straight-line or tiny trajectories) falls back to
    translation-only alignment.
    """
    if alignment not in ("sim3", "se3"):
        raise ValueError(f"alignment must be 'sim3' or 'se3', got {alignment!r}")
    ia, ib = associate(estimate, reference, gate)
    src = estimate.translations()[ia]
    dst = reference.translations()[ib]
    try:
        transform = umeyama(src, dst, with_scale=(alignment == "sim3"))
        aligned = transform.act(src)
    except DegenerateConfiguration:
        aligned = src - src.mean(axis=0) + dst.mean(axis=0)
    return float(np.sqrt(((aligned - dst) ** 2).sum(axis=1).mean()))
