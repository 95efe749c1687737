"""Trajectory evaluation: rigid alignment, ATE, aggregation, plots.

The error metric is the RMS position error after the best rigid (SE(3))
alignment of the estimate onto the reference. Scale is deliberately not
aligned: a metric estimate with a wrong scale shows up as error.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .lie import Pose3


class EvalError(ValueError):
    pass


ASSOCIATION_WINDOW_S = 0.010  # half the 20 Hz frame period


def associate(t_est: np.ndarray, t_gt: np.ndarray,
              window: float = ASSOCIATION_WINDOW_S):
    """Nearest-timestamp matching within the window; greedy, one-to-one."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    pairs = []
    used = np.zeros(len(t_gt), dtype=bool)
    for i, t in enumerate(t_est):
        j = int(np.argmin(np.abs(t_gt - t)))
        if not used[j] and abs(t_gt[j] - t) <= window:
            pairs.append((i, j))
            used[j] = True
    return pairs


def align_se3(est: np.ndarray, gt: np.ndarray) -> Pose3:
    """Closed-form rigid transform T minimizing sum ||T est_i - gt_i||^2.

    Orthogonal Procrustes with centroid translation and determinant
    correction; no scale. Degenerate (collinear or coincident) point sets
    are rejected.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est) != len(gt) or len(est) < 3:
        raise EvalError("alignment needs at least 3 associated positions")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    E = est - mu_e
    G = gt - mu_g
    W = E.T @ G
    U, S, Vt = np.linalg.svd(W)
    if S[1] <= 1e-12 * max(S[0], 1e-300) or S[0] <= 1e-12:
        raise EvalError("degenerate configuration: positions collinear or "
                        "coincident")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mu_g - R @ mu_e
    return Pose3(R, t)


@dataclass
class EvalReport:
    e_ate: float
    errors: np.ndarray
    alignment: Pose3
    n_matched: int
    n_unmatched: int
    metadata: dict = field(default_factory=dict)
    failed: bool = False

    @staticmethod
    def failure(metadata=None) -> "EvalReport":
        return EvalReport(e_ate=float("inf"), errors=np.zeros(0),
                          alignment=Pose3.identity(), n_matched=0,
                          n_unmatched=0, metadata=metadata or {}, failed=True)


def ate(t_est, est_positions, t_gt, gt_positions, metadata=None) -> EvalReport:
    """RMS position error over matched keyframes after SE(3) alignment."""
    pairs = associate(t_est, t_gt)
    n_unmatched = len(t_est) - len(pairs)
    if len(pairs) < 3:
        raise EvalError("fewer than 3 matched keyframes")
    est = np.asarray(est_positions, dtype=float)[[i for i, _ in pairs]]
    gt = np.asarray(gt_positions, dtype=float)[[j for _, j in pairs]]
    T = align_se3(est, gt)
    aligned = T.act(est)
    errors = np.linalg.norm(aligned - gt, axis=1)
    e_ate = float(np.sqrt(np.mean(errors ** 2)))
    return EvalReport(e_ate=e_ate, errors=errors, alignment=T,
                      n_matched=len(pairs), n_unmatched=n_unmatched,
                      metadata=metadata or {})


def ate_poses(t_est, poses_est, t_gt, poses_gt, metadata=None) -> EvalReport:
    return ate(t_est, np.array([p.t for p in poses_est]),
               t_gt, np.array([p.t for p in poses_gt]), metadata)


@dataclass
class RunSummary:
    sequences: dict          # name -> median e_ate over succeeded runs
    grid: dict               # name -> list of (e_ate or None per run)
    failures: dict           # name -> number of failed runs


def aggregate_runs(reports: dict[str, list[EvalReport]]) -> RunSummary:
    """Median per sequence; failed runs are excluded and flagged."""
    sequences, grid, failures = {}, {}, {}
    for name, runs in reports.items():
        vals = [r.e_ate for r in runs if not r.failed]
        grid[name] = [None if r.failed else r.e_ate for r in runs]
        failures[name] = sum(1 for r in runs if r.failed)
        sequences[name] = float(np.median(vals)) if vals else float("nan")
    return RunSummary(sequences=sequences, grid=grid, failures=failures)


# ---------------------------------------------------------------------------
# emission (CSV + hand-rolled SVG: byte-deterministic)


def _svg_header(w, h):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
            f'height="{h}" viewBox="0 0 {w} {h}">\n'
            f'<rect width="{w}" height="{h}" fill="white"/>\n')


def _polyline(points, color, width=1.5):
    pts = " ".join("%.2f,%.2f" % (x, y) for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" '
            f'stroke-width="{width}" points="{pts}"/>\n')


def trajectory_overlay_svg(path, est_xy: np.ndarray, gt_xy: np.ndarray,
                           size: int = 480):
    """Top-down overlay of aligned estimate (blue) and reference (orange)."""
    both = np.concatenate([est_xy, gt_xy], axis=0)
    lo = both.min(axis=0)
    hi = both.max(axis=0)
    span = np.maximum(hi - lo, 1e-9).max()
    margin = 24.0
    scale = (size - 2 * margin) / span

    def to_px(xy):
        return [(margin + (x - lo[0]) * scale,
                 size - margin - (y - lo[1]) * scale) for x, y in xy]

    with open(path, "w", encoding="utf-8") as f:
        f.write(_svg_header(size, size))
        f.write(_polyline(to_px(gt_xy), "#e08020", 2.0))
        f.write(_polyline(to_px(est_xy), "#2060c0", 1.5))
        f.write('<text x="8" y="16" font-size="12">estimate (blue) vs '
                'reference (orange), top-down</text>\n')
        f.write("</svg>\n")


def error_grid_svg(path, summary: RunSummary, vmax: float | None = None,
                   cell: int = 28):
    """Color grid of per-run errors; white cells are failed runs."""
    names = sorted(summary.grid)
    n_runs = max((len(v) for v in summary.grid.values()), default=0)
    w = 80 + n_runs * cell
    h = 30 + len(names) * cell
    finite = [e for runs in summary.grid.values() for e in runs
              if e is not None and np.isfinite(e)]
    vmax = vmax or (max(finite) if finite else 1.0)

    def color(e):
        if e is None or not np.isfinite(e):
            return "#ffffff"
        u = min(max(e / vmax, 0.0), 1.0)
        r = int(255 * u)
        g = int(200 * (1 - u))
        return f"#{r:02x}{g:02x}40"

    with open(path, "w", encoding="utf-8") as f:
        f.write(_svg_header(w, h))
        for row, name in enumerate(names):
            y = 24 + row * cell
            f.write(f'<text x="4" y="{y + cell * 0.65:.1f}" '
                    f'font-size="11">{name}</text>\n')
            for col, e in enumerate(summary.grid[name]):
                x = 76 + col * cell
                f.write(f'<rect x="{x}" y="{y}" width="{cell - 2}" '
                        f'height="{cell - 2}" fill="{color(e)}" '
                        f'stroke="#808080"/>\n')
        f.write("</svg>\n")


def write_report_csv(path, reports: dict[str, list[EvalReport]]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "run", "e_ate_m", "matched", "unmatched",
                    "failed"])
        for name in sorted(reports):
            for i, r in enumerate(reports[name]):
                w.writerow([name, i, "" if r.failed else "%.9f" % r.e_ate,
                            r.n_matched, r.n_unmatched, int(r.failed)])


def emit_plots(reports: dict[str, list[EvalReport]], out_dir,
               overlays: dict[str, tuple] | None = None):
    """Write the CSV and SVG artifacts of an evaluation batch.

    overlays: optional name -> (est_xy, gt_xy) aligned top-down tracks.
    """
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(os.path.join(out_dir, "ate_runs.csv"), reports)
    summary = aggregate_runs(reports)
    error_grid_svg(os.path.join(out_dir, "ate_grid.svg"), summary)
    for name, (est_xy, gt_xy) in (overlays or {}).items():
        trajectory_overlay_svg(os.path.join(out_dir, f"trajectory_{name}.svg"),
                               est_xy, gt_xy)
    return summary
