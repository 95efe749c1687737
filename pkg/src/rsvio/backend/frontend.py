"""Frame tracking and point management in front of the windowed backend.

Each incoming frame is initialized by IMU state prediction; its twist comes
from the IMU-derived prior. An optional direct alignment (pose-only
Gauss-Newton against the window's active points) polishes the prediction.
Keyframes are created on mean-flow, brightness-change or interval criteria;
when one is created, the previous keyframe's candidate pixels receive
inverse depths from a discrete epipolar search and become active points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..camera import CameraModel
from ..image import gradient_magnitude, in_bounds_mask, interp_bicubic
from ..imu import ImuData, integrate_stream, predict_state
from ..lie import Pose3, se3_exp
from ..photometric import (PATTERN, PhotoSettings, PointBlock, huber_weights,
                           pair_residuals, solve_capture_times)
from ..state import (Calibration, KeyframeState, MetricState, ScaleGravity,
                     imu_pose_metric, metric_state)
from ..twist_prior import camera_twist, imu_twist, prior_twist
from .window import Keyframe, Window

log = logging.getLogger(__name__)


def camera_pose_from_imu(T_WmI: Pose3, sg: ScaleGravity,
                         calib: Calibration) -> Pose3:
    """Invert the frame chain: metric IMU pose -> non-metric T_CfWf."""
    R_ci, t_ci = calib.T_CmI.R, calib.T_CmI.t
    R_cw = R_ci @ T_WmI.R.T @ sg.R
    t_cw = (t_ci - R_cw @ (sg.R.T @ T_WmI.t)) / sg.s
    return Pose3(R_cw, t_cw)


def select_candidate_pixels(image: np.ndarray, count: int, rng,
                            grid: int = 16, margin: float = 4.0) -> np.ndarray:
    """Gradient-proportional sampling with per-cell quotas (seeded)."""
    h, w = image.shape
    gmag = gradient_magnitude(image)
    ys, xs = np.mgrid[0:h, 0:w]
    ok = ((xs >= margin) & (xs < w - margin)
          & (ys >= margin) & (ys < h - margin) & (gmag > 1e-3))
    cell_w = w / grid
    cell_h = h / grid
    per_cell = max(1, int(np.ceil(count / (grid * grid))))
    picked = []
    for cy in range(grid):
        for cx in range(grid):
            mask = (ok & (xs >= cx * cell_w) & (xs < (cx + 1) * cell_w)
                    & (ys >= cy * cell_h) & (ys < (cy + 1) * cell_h))
            idx = np.flatnonzero(mask)
            if len(idx) == 0:
                continue
            weights = gmag.ravel()[idx]
            p = weights / weights.sum()
            take = min(per_cell, len(idx))
            chosen = rng.choice(idx, size=take, replace=False, p=p)
            picked.extend(chosen)
    picked = np.array(picked, dtype=int)
    if len(picked) > count:
        order = np.argsort(gmag.ravel()[picked])[::-1]
        picked = picked[order[:count]]
    uv = np.stack([picked % w, picked // w], axis=-1).astype(float)
    return uv


def epipolar_init(host: KeyframeState, target: KeyframeState,
                  cam: CameraModel, host_img: np.ndarray,
                  target_img: np.ndarray, uv: np.ndarray,
                  inv_depth_range: tuple[float, float], steps: int,
                  ssd_max: float, rs_enabled: bool,
                  settings: PhotoSettings | None = None,
                  min_search_px: float = 3.0):
    """Discrete inverse-depth search per candidate pixel.

    Projects every candidate at a log-spaced set of inverse depths into the
    target (rolling-shutter aware) and scores the 8-pixel pattern SSD
    against the host patch. Candidates whose projection barely moves across
    the depth range carry no depth information (no parallax) and are
    rejected. Returns (uv_kept, inv_depth, score).
    """
    settings = settings or PhotoSettings()
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    n = len(uv)
    if n == 0:
        return uv, np.zeros(0), np.zeros(0)
    depths = np.geomspace(inv_depth_range[0], inv_depth_range[1], steps)

    uv_k = uv[:, None, :] + PATTERN[None, :, :]
    host_vals, _, _, host_ok = interp_bicubic(host_img, uv_k[..., 0], uv_k[..., 1])
    dirs = cam.ray_dirs(uv_k)                                  # (n, 8, 3)

    if rs_enabled:
        t_h, _ = cam.capture_time_batch(uv)
    else:
        t_h = np.zeros(n)
    Eh_R, Eh_t = (se3_exp((host.xi if rs_enabled else np.zeros(6))[None, :]
                          * t_h[:, None]))
    M = target.T_CfWf @ host.T_CfWf.inverse()

    best_score = np.full(n, np.inf)
    best_d = np.full(n, depths[0])
    score_grid = np.full((n, steps), np.inf)
    uv_near = np.zeros((n, 2))
    uv_far = np.zeros((n, 2))
    for si, d in enumerate(depths):
        z = (np.swapaxes(Eh_R, -1, -2)[:, None]
             @ ((dirs / d) - Eh_t[:, None, :])[..., None])[..., 0]
        y = (M.R[None, None] @ z[..., None])[..., 0] + M.t
        t_star, conv = solve_capture_times(y[:, 4, :],
                                           target.xi if rs_enabled else np.zeros(6),
                                           cam, settings, rs_enabled)
        B_R, B_t = se3_exp((target.xi if rs_enabled else np.zeros(6))[None, :]
                           * t_star[:, None])
        p = (B_R[:, None] @ y[..., None])[..., 0] + B_t[:, None, :]
        uvp, in_front = cam.project_batch(p)
        vals, _, _, ok = interp_bicubic(target_img, uvp[..., 0], uvp[..., 1])
        valid = host_ok & ok & in_front & conv[:, None]
        diff = np.where(valid, vals - host_vals, 0.0)
        count = valid.sum(axis=1)
        score = np.where(count == 8, (diff ** 2).sum(axis=1) / 8.0, np.inf)
        score_grid[:, si] = score
        better = score < best_score
        best_score = np.where(better, score, best_score)
        best_d = np.where(better, d, best_d)
        if si == 0:
            uv_far = uvp[:, 4, :].copy()
        if si == steps - 1:
            uv_near = uvp[:, 4, :].copy()

    # parabola refinement in log inverse depth around the best sample
    best_idx = np.argmin(score_grid, axis=1)
    log_d = np.log(depths)
    d_ref = best_d.copy()
    for i in range(n):
        k = best_idx[i]
        if 0 < k < steps - 1 and np.all(np.isfinite(score_grid[i, k - 1:k + 2])):
            s0, s1, s2 = score_grid[i, k - 1:k + 2]
            denom = s0 - 2 * s1 + s2
            if denom > 1e-12:
                delta = 0.5 * (s0 - s2) / denom
                delta = np.clip(delta, -1.0, 1.0)
                d_ref[i] = np.exp(log_d[k] + delta * (log_d[1] - log_d[0]))

    keep = np.isfinite(best_score) & (best_score <= ssd_max)
    # observability gates: the search line must be long enough and the score
    # valley pronounced enough that depth is actually constrained
    search_px = np.linalg.norm(uv_near - uv_far, axis=1)
    keep &= search_px >= min_search_px
    spread = np.where(np.isfinite(score_grid), score_grid, 0.0).max(axis=1)
    keep &= spread > np.maximum(4.0 * best_score, 25.0)
    # interior-minimum only: valley on the range edge means truncated search
    keep &= (best_idx > 0) & (best_idx < steps - 1)
    return uv[keep], d_ref[keep], best_score[keep]


def coarse_align(window: Window, frame_state: KeyframeState,
                 frame_img: np.ndarray, iterations: int = 4) -> KeyframeState:
    """Pose-only Gauss-Newton of the window's points against one frame."""
    cfg = window.config
    settings = window.photo_settings()
    state = frame_state.copy()
    hosts = [kf for kf in window.keyframes if kf.points is not None
             and len(kf.points) > 0]
    if not hosts:
        return state
    E_prev = None
    for _ in range(iterations):
        H = np.zeros((6, 6))
        b = np.zeros(6)
        E = 0.0
        n_valid = 0
        for kf in hosts:
            obs = pair_residuals(kf.points, kf.state, state, window.cam,
                                 frame_img, settings, window.rs_enabled,
                                 with_jacobians=True,
                                 affine_enabled=cfg.affine_enabled)
            e_h, w_h = huber_weights(obs.residual, cfg.huber_intensity)
            w = obs.weight * w_h * obs.valid
            J = obs.J_pose_j
            H += np.einsum("nka,nk,nkb->ab", J, w, J)
            b += np.einsum("nka,nk->a", J, w * obs.residual)
            E += float((obs.weight * e_h * obs.valid).sum())
            n_valid += int(obs.valid.sum())
        if n_valid < 32:
            return state
        if E_prev is not None and E > E_prev:
            break
        E_prev = E
        try:
            step = np.linalg.solve(H + 1e-6 * np.eye(6), -b)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > 0.5:
            break
        state.T_CfWf = Pose3.exp(step) @ state.T_CfWf
        if np.linalg.norm(step) < 1e-10:
            break
    return state


def mean_flow(window: Window, frame_state: KeyframeState,
              frame_shape) -> float:
    """Mean pixel displacement of the last keyframe's points into a frame."""
    last = window.keyframes[-1]
    if last.points is None or len(last.points) == 0:
        return 0.0
    settings = window.photo_settings()
    block = last.points
    act = block.active_mask
    if act.sum() == 0:
        return 0.0
    # project centers into the candidate frame
    d = block.inv_depth
    dirs = block.dirs[:, 4, :]
    t_h = block.t_host if window.rs_enabled else np.zeros(len(block))
    Eh_R, Eh_t = se3_exp((last.state.xi if window.rs_enabled else np.zeros(6))[None, :]
                         * t_h[:, None])
    z = (np.swapaxes(Eh_R, -1, -2) @ ((dirs / d[:, None]) - Eh_t)[..., None])[..., 0]
    M = frame_state.T_CfWf @ last.state.T_CfWf.inverse()
    y = (M.R @ z[..., None])[..., 0] + M.t
    xi = frame_state.xi if window.rs_enabled else np.zeros(6)
    t_star, _ = solve_capture_times(y, xi, window.cam, settings,
                                    window.rs_enabled)
    B_R, B_t = se3_exp(xi[None, :] * t_star[:, None])
    p = (B_R @ y[..., None])[..., 0] + B_t
    uv, in_front = window.cam.project_batch(p)
    ok = act & in_front & in_bounds_mask(frame_shape, uv[:, 0], uv[:, 1])
    if ok.sum() < 8:
        return float("inf")
    return float(np.linalg.norm(uv[ok] - block.uv[ok], axis=1).mean())


@dataclass
class TrackResult:
    state: KeyframeState
    is_keyframe: bool
    flow: float
    reason: str


class FrameTracker:
    """Propagates the current metric state and decides keyframe creation."""

    def __init__(self, window: Window, imu: ImuData, rng):
        self.window = window
        self.imu = imu
        self.rng = rng
        self.current: MetricState | None = None
        self.last_time: float | None = None
        self.last_kf_time: float | None = None
        self.next_kf_id = 0

    def propagate(self, t: float) -> MetricState:
        if self.current is None or self.last_time is None:
            raise RuntimeError("tracker not bootstrapped")
        if t <= self.last_time:
            raise ValueError("frames must arrive in time order")
        seg = self.imu.segment(self.last_time, t)
        preint = integrate_stream(seg, self.current.b, self.window.noise)
        R, p, v = predict_state(self.current, preint, self.window.calib.g,
                                self.last_time, t, check_bias=False)
        return MetricState(R, p, v, self.current.b.copy(), t)


def frame_state_from_metric(ms: MetricState, window: Window) -> KeyframeState:
    """Non-metric keyframe state from a metric IMU state (twist left zero)."""
    T_WmI = Pose3(ms.R, ms.p)
    pose = camera_pose_from_imu(T_WmI, window.sg, window.calib)
    return KeyframeState(timestamp=ms.timestamp, T_CfWf=pose,
                         v=ms.v.copy(), b=ms.b.copy())


def init_twist_from_prior(kf: KeyframeState, window: Window, gyro: np.ndarray):
    if not window.twists_active:
        kf.xi = np.zeros(6)
        return
    xi_i = imu_twist(kf, window.sg, window.calib, gyro)
    xi_c = camera_twist(xi_i, window.calib)
    kf.xi = prior_twist(xi_c, window.sg.s, window.cam.row_time_td)
