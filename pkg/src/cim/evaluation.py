"""Coverage and directionality metrics, trajectory CSV export and SVG plots."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CimError

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class Trajectory:
    positions: np.ndarray  # (T, 2)
    z: np.ndarray
    skill_index: int | None = None
    seed: int = 0
    success: bool = False
    ret: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.z = np.asarray(self.z, dtype=float).ravel()


@dataclass
class CoverageReport:
    bin_size: float
    occupied_bins: int
    n_trajectories: int
    per_seed: dict = field(default_factory=dict)


def occupied_bins(trajectories, bin_size: float) -> set:
    bins = set()
    for tr in trajectories:
        cells = np.floor(tr.positions / bin_size).astype(np.int64)
        bins.update(map(tuple, cells.tolist()))
    return bins


def state_coverage(trajectories, bin_size: float) -> CoverageReport:
    """Number of distinct ``floor(position / bin_size)`` cells visited."""
    if bin_size <= 0:
        raise ValueError("bin_size must be positive")
    trajectories = list(trajectories)
    per_seed = {}
    for seed in sorted({tr.seed for tr in trajectories}):
        per_seed[seed] = len(occupied_bins([t for t in trajectories if t.seed == seed], bin_size))
    return CoverageReport(bin_size, len(occupied_bins(trajectories, bin_size)), len(trajectories), per_seed)


@dataclass
class DirectionalityReport:
    mean_cosine: float | None
    n_used: int
    n_skipped: int

    @property
    def defined(self) -> bool:
        return self.mean_cosine is not None


def skill_directionality(trajectories, min_displacement: float = 1e-6) -> DirectionalityReport:
    """Mean cosine between each trajectory's net displacement and its skill's first two components."""
    cos, skipped = [], 0
    for tr in trajectories:
        disp = tr.positions[-1] - tr.positions[0]
        d = np.linalg.norm(disp)
        zn = np.linalg.norm(tr.z[:2])
        if d < min_displacement or zn == 0.0:
            skipped += 1
            continue
        cos.append(float(disp @ tr.z[:2] / (d * zn)))
    return DirectionalityReport(float(np.mean(cos)) if cos else None, len(cos), skipped)


def best_rotation_directionality(trajectories) -> float | None:
    """Directionality after the best orthogonal map of skill space onto the plane.

    The contrastive objective is invariant to rotations and reflections of the
    latent space, so this gauge-free variant is reported next to the raw one.
    """
    disp, zs = [], []
    for tr in trajectories:
        d = tr.positions[-1] - tr.positions[0]
        if np.linalg.norm(d) >= 1e-6 and np.linalg.norm(tr.z[:2]) > 0:
            disp.append(d / np.linalg.norm(d))
            zs.append(tr.z[:2] / np.linalg.norm(tr.z[:2]))
    if not disp:
        return None
    u, _, vt = np.linalg.svd(np.asarray(zs).T @ np.asarray(disp))
    rot = u @ vt
    return float(np.mean(np.sum((np.asarray(zs) @ rot) * np.asarray(disp), axis=1)))


def skill_hue(z) -> float:
    """Hue in degrees [0, 360) from the angle of the first two skill components."""
    z = np.asarray(z, dtype=float)
    ang = math.degrees(math.atan2(z[1], z[0])) if len(z) > 1 else (0.0 if z[0] >= 0 else 180.0)
    return ang % 360.0


def _color(tr: Trajectory) -> str:
    if tr.skill_index is not None:
        return PALETTE[tr.skill_index % len(PALETTE)]
    return f"hsl({skill_hue(tr.z):.1f},80%,45%)"


def export_traj_csv(trajectories, path) -> None:
    trajectories = list(trajectories)
    n_z = max((len(t.z) for t in trajectories), default=0)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj_id", "step", "x", "y"] + [f"z_{i}" for i in range(n_z)])
            for tid, tr in enumerate(trajectories):
                zs = [repr(float(v)) for v in tr.z]
                for step, (x, y) in enumerate(tr.positions):
                    w.writerow([tid, step, repr(float(x)), repr(float(y))] + zs)
    except OSError as exc:
        raise CimError(f"cannot write trajectories to {path}: {exc}") from exc


def read_traj_csv(path) -> list[Trajectory]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CimError(f"cannot read trajectories from {path}: {exc}") from exc
    if not rows:
        return []
    header = rows[0]
    nz = sum(1 for h in header if h.startswith("z_"))
    grouped: dict[int, list] = {}
    for row in rows[1:]:
        grouped.setdefault(int(row[0]), []).append(row)
    out = []
    for tid in sorted(grouped):
        rs = sorted(grouped[tid], key=lambda r: int(r[1]))
        pos = [[float(r[2]), float(r[3])] for r in rs]
        z = [float(v) for v in rs[0][4:4 + nz]]
        out.append(Trajectory(np.array(pos), np.array(z)))
    return out


def render_svg(trajectories, path, size: int = 480, margin: int = 12) -> None:
    """Polylines in the x-y plane, coloured by skill."""
    trajectories = [t for t in trajectories if len(t.positions)]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>']
    if trajectories:
        allp = np.concatenate([t.positions for t in trajectories])
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        span = max(float(np.max(hi - lo)), 1e-9)
        scale = (size - 2 * margin) / span
        for tr in trajectories:
            px = margin + (tr.positions[:, 0] - lo[0]) * scale
            py = size - margin - (tr.positions[:, 1] - lo[1]) * scale
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
            parts.append(f'<polyline fill="none" stroke="{_color(tr)}" stroke-width="1.2" points="{pts}"/>')
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise CimError(f"cannot write SVG to {path}: {exc}") from exc
