"""Rolling-shutter-aware photometric residuals and analytic Jacobians.

A tracked point lives in a host keyframe at a fixed pixel with an inverse
depth. Its capture time t_host follows from its pixel (fixed per point, the
host observation is rolling-shutter too); the host pose is evaluated there.
Projecting into a target frame requires the target pose at the capture time
of the projected pixel, which itself depends on the pose: this fixed point
is solved by Picard iteration on the pattern center, initialized at the
capture time of the global-shutter projection. Residual Jacobians are
differentiated through the converged capture time by implicit
differentiation of the fixed-point condition.

Capture times are measured in full-resolution row units and per-keyframe
twists are per row unit, so the same code path with all times identically
zero is exactly the global-shutter photometric model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel
from .image import in_bounds_mask, interp_bicubic
from .lie import Pose3, se3_exp, se3_left_jacobian, so3_hat
from .state import KeyframeState

# Residual pattern: 8-pixel spread around the point (dx, dy), center at
# index PATTERN_CENTER.
PATTERN = np.array([(0, -2), (-1, -1), (1, -1), (-2, 0),
                    (0, 0), (2, 0), (-1, 1), (0, 2)], dtype=float)
PATTERN_CENTER = 4
PATTERN_MARGIN = 3.0

STATUS_ACTIVE = 0
STATUS_OUTLIER = 1
STATUS_OOB = 2


@dataclass(frozen=True)
class PhotoSettings:
    huber_intensity: float = 9.0          # on the 0..255 scale
    gradient_weight_c: float = 50.0
    max_fixed_point_iters: int = 5
    fixed_point_tol_rows: float = 1e-3
    min_depth: float = 1e-6
    # observations whose |t*| exceeds (height/2 + this) rows are dropped
    capture_time_margin_rows: float = 8.0
    # |d g / d t| above this means the fixed point is not contractive
    max_time_feedback: float = 0.5


@dataclass
class TrackedPoint:
    host_id: int
    uv: np.ndarray
    inv_depth: float
    status: int = STATUS_ACTIVE


class PointBlock:
    """Column-wise storage of the points hosted in one keyframe."""

    def __init__(self, host_id: int, uv: np.ndarray, inv_depth: np.ndarray,
                 cam: CameraModel, host_image: np.ndarray, rs_enabled: bool,
                 settings: PhotoSettings | None = None):
        settings = settings or PhotoSettings()
        self.host_id = host_id
        self.uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        self.inv_depth = np.asarray(inv_depth, dtype=float).reshape(-1).copy()
        if np.any(self.inv_depth <= 0):
            raise ValueError("inverse depths must be positive")
        n = len(self.uv)
        self.status = np.zeros(n, dtype=np.int8)

        uv_k = self.uv[:, None, :] + PATTERN[None, :, :]      # (n, 8, 2)
        self.dirs = cam.ray_dirs(uv_k)                        # (n, 8, 3)
        if rs_enabled:
            t, valid = cam.capture_time_batch(self.uv)
            if not np.all(valid):
                raise ValueError("host pixel outside distortion domain")
            self.t_host = t
        else:
            self.t_host = np.zeros(n)
        val, gx, gy, ok = interp_bicubic(host_image, uv_k[..., 0], uv_k[..., 1])
        if not np.all(ok):
            raise ValueError("host pattern leaves the image; enforce margins")
        self.host_intensity = val                             # (n, 8)
        c2 = settings.gradient_weight_c ** 2
        self.grad_weight = c2 / (c2 + gx * gx + gy * gy)      # (n, 8)

    def __len__(self):
        return len(self.uv)

    @property
    def active_mask(self) -> np.ndarray:
        return self.status == STATUS_ACTIVE


def pose_at_time(kf: KeyframeState, t) -> Pose3:
    """Constant-twist pose exp(xi * t) T0 at capture-time offset t (rows)."""
    return Pose3.exp(kf.xi * float(t)) @ kf.T_CfWf


def _exp_batch(xi: np.ndarray, t: np.ndarray):
    return se3_exp(xi[None, :] * np.asarray(t, dtype=float)[:, None])


def solve_capture_times(q: np.ndarray, xi_j: np.ndarray, cam: CameraModel,
                        settings: PhotoSettings, rs_enabled: bool):
    """Fixed point t = capture_time(project(exp(xi_j t) q)) per point.

    q: (n, 3) points in the target's central (t=0) camera frame.
    Returns (t_star, converged).
    """
    n = q.shape[0]
    if not rs_enabled:
        return np.zeros(n), np.ones(n, dtype=bool)
    uv0, vis = cam.project_batch(q)
    t, dom = cam.capture_time_batch(uv0)
    t = np.where(vis & dom, t, 0.0)
    converged = np.zeros(n, dtype=bool)
    # fixed iteration count: the solve stays a smooth composition, so
    # residuals remain finite-difference-consistent
    for _ in range(settings.max_fixed_point_iters):
        E_R, E_t = _exp_batch(xi_j, t)
        p = (E_R @ q[..., None])[..., 0] + E_t
        uv, vis_i = cam.project_batch(p)
        t_new, dom_i = cam.capture_time_batch(uv)
        ok = vis_i & dom_i
        t_new = np.where(ok, t_new, t)
        converged = ok & (np.abs(t_new - t) < settings.fixed_point_tol_rows)
        t = t_new
    return t, converged


def project_rs(point: TrackedPoint, host: KeyframeState, target: KeyframeState,
               cam: CameraModel, settings: PhotoSettings | None = None,
               rs_enabled: bool = True):
    """Rolling-shutter projection of one point into a target frame.

    Returns (uv, t_star) or raises ValueError when the observation is not
    representable (behind camera / diverged constraint).
    """
    settings = settings or PhotoSettings()
    if point.inv_depth <= 0:
        raise ValueError("inverse depth must be positive")
    if rs_enabled:
        t_h = cam.capture_time(np.asarray(point.uv, dtype=float))
    else:
        t_h = 0.0
    T_H = pose_at_time(host, t_h)
    p_h = cam.unproject(np.asarray(point.uv, dtype=float), point.inv_depth)
    q = (target.T_CfWf @ T_H.inverse()).act(p_h)[None, :]
    t_star, converged = solve_capture_times(q, target.xi, cam, settings, rs_enabled)
    if not converged[0]:
        raise ValueError("rolling-shutter constraint did not converge")
    E_R, E_t = _exp_batch(target.xi, t_star)
    p_t = E_R[0] @ q[0] + E_t[0]
    if p_t[2] <= settings.min_depth:
        raise ValueError("point behind target camera")
    uv = cam.project(p_t)
    return uv, float(t_star[0])


class PairObservations:
    """Residuals (and optional Jacobians) of one host->target frame pair."""

    __slots__ = ("residual", "valid", "t_star", "weight",
                 "J_d", "J_pose_h", "J_twist_h", "J_pose_j", "J_twist_j",
                 "J_affine")

    def __init__(self, n):
        self.residual = np.zeros((n, 8))
        self.valid = np.zeros((n, 8), dtype=bool)
        self.t_star = np.zeros(n)
        self.weight = np.zeros((n, 8))
        self.J_d = None
        self.J_pose_h = None
        self.J_twist_h = None
        self.J_pose_j = None
        self.J_twist_j = None
        self.J_affine = None


def pair_residuals(points: PointBlock, host: KeyframeState, target: KeyframeState,
                   cam: CameraModel, target_image: np.ndarray,
                   settings: PhotoSettings, rs_enabled: bool,
                   with_jacobians: bool = False,
                   affine_enabled: bool = True) -> PairObservations:
    """Photometric residuals of all points of ``points`` seen in ``target``."""
    n = len(points)
    out = PairObservations(n)
    if n == 0:
        return out
    active = points.active_mask

    d = points.inv_depth
    t_h = points.t_host if rs_enabled else np.zeros(n)

    # host pose at the host capture time; world point via T_h0^-1 z
    Eh_R, Eh_t = _exp_batch(host.xi if rs_enabled else np.zeros(6), t_h)
    z = (np.swapaxes(Eh_R, -1, -2)[:, None, :, :]
         @ (points.dirs / d[:, None, None] - Eh_t[:, None, :])[..., None])[..., 0]
    M = target.T_CfWf @ host.T_CfWf.inverse()
    y = (M.R[None, None] @ z[..., None])[..., 0] + M.t    # (n, 8, 3)

    xi_j = target.xi if rs_enabled else np.zeros(6)
    t_star, converged = solve_capture_times(
        y[:, PATTERN_CENTER, :], xi_j, cam, settings, rs_enabled)
    out.t_star = t_star

    B_R, B_t = _exp_batch(xi_j, t_star)
    p = (B_R[:, None] @ y[..., None])[..., 0] + B_t[:, None, :]   # (n, 8, 3)
    uv, in_front = cam.project_batch(p)

    t_bound = (cam.height / 2.0 + settings.capture_time_margin_rows) * cam.row_scale
    ok_time = converged & (np.abs(t_star) <= t_bound)
    in_img = in_bounds_mask(target_image.shape, uv[..., 0], uv[..., 1],
                            margin=1.0)
    I_t, gx, gy, ok_interp = interp_bicubic(target_image, uv[..., 0], uv[..., 1])

    valid = (active[:, None] & ok_time[:, None] & in_front & in_img & ok_interp)

    if affine_enabled:
        gain = np.exp(target.a_aff - host.a_aff)
        offset = target.b_aff - host.b_aff
    else:
        gain, offset = 1.0, 0.0
    r = I_t - gain * points.host_intensity - offset
    out.residual = np.where(valid, r, 0.0)
    out.valid = valid
    out.weight = np.where(valid, points.grad_weight, 0.0)

    if not with_jacobians:
        return out

    grad = np.stack([gx, gy], axis=-1)                      # (n, 8, 2)
    J_pi = cam.project_jacobian(np.where(in_front[..., None], p,
                                         np.array([0.0, 0.0, 1.0])))
    vel = xi_j[None, None, :3] + np.cross(np.broadcast_to(xi_j[3:], p.shape), p)

    # dp/dtheta at fixed t for each variable
    y_hat = so3_hat(y)                                      # (n, 8, 3, 3)
    z_hat = so3_hat(z)
    R_N = B_R @ M.R                                         # (n, 3, 3)

    def stack_eps(R_left, q_hat):
        # action of a left increment: R_left @ [I | -hat(q)]
        J = np.empty(q_hat.shape[:-2] + (3, 6))
        J[..., :3] = np.broadcast_to(R_left[:, None], q_hat.shape[:-2] + (3, 3))
        J[..., 3:] = -(R_left[:, None] @ q_hat)
        return J

    dp_pose_j = stack_eps(B_R, y_hat)                       # (n, 8, 3, 6)
    dp_pose_h = -stack_eps(R_N, z_hat)
    Jl_j = se3_left_jacobian(xi_j[None, :] * t_star[:, None])
    p_hat = so3_hat(p)
    act_p = np.concatenate([np.broadcast_to(np.eye(3), p_hat.shape[:-2] + (3, 3)),
                            -p_hat], axis=-1)               # (n, 8, 3, 6)
    dp_twist_j = (act_p @ Jl_j[:, None]) * t_star[:, None, None, None]
    Jl_h = se3_left_jacobian(-(host.xi if rs_enabled else np.zeros(6))[None, :]
                             * t_h[:, None])
    act_z = np.concatenate([np.broadcast_to(np.eye(3), z_hat.shape[:-2] + (3, 3)),
                            -z_hat], axis=-1)
    dp_twist_h = -(R_N[:, None] @ (act_z @ Jl_h[:, None])) * t_h[:, None, None, None]
    R_chain = R_N @ np.swapaxes(Eh_R, -1, -2)
    dp_d = (R_chain[:, None] @ points.dirs[..., None])[..., 0] * (-1.0 / (d * d))[:, None, None]

    # implicit differentiation through the fixed point (pattern center)
    c = PATTERN_CENTER
    if rs_enabled and cam.row_time_td > 0.0:
        ct_grad = cam.capture_time_gradient(uv[:, c, :])    # (n, 2)
        D = (ct_grad[:, None, :] @ J_pi[:, c])[:, 0, :]     # (n, 3)
        dgdt = np.einsum("ni,ni->n", D, vel[:, c, :])
        contractive = np.abs(dgdt) <= settings.max_time_feedback
        denom = np.where(contractive, 1.0 - dgdt, 1.0)
        valid &= contractive[:, None]
        out.valid = valid

        def dt_dtheta(dp_c):
            return np.einsum("ni,ni...->n...", D, dp_c) / denom[..., None]

        dt_pose_j = dt_dtheta(dp_pose_j[:, c])              # (n, 6)
        dt_pose_h = dt_dtheta(dp_pose_h[:, c])
        dt_twist_j = dt_dtheta(dp_twist_j[:, c])
        dt_twist_h = dt_dtheta(dp_twist_h[:, c])
        dt_d = np.einsum("ni,ni->n", D, dp_d[:, c]) / denom
    else:
        dt_pose_j = dt_pose_h = dt_twist_j = dt_twist_h = np.zeros((n, 6))
        dt_d = np.zeros(n)

    gJ = grad[:, :, None, :] @ J_pi                          # (n, 8, 1, 3)
    gJ = gJ[:, :, 0, :]                                      # (n, 8, 3)

    def chain(dp, dt):
        # dr = gJ . (dp + vel * dt)
        full = dp + vel[..., None] * dt[:, None, None, :]
        return np.einsum("nki,nki...->nk...", gJ, full)

    vmask = valid.astype(float)
    out.J_pose_j = chain(dp_pose_j, dt_pose_j) * vmask[..., None]
    out.J_pose_h = chain(dp_pose_h, dt_pose_h) * vmask[..., None]
    out.J_twist_j = chain(dp_twist_j, dt_twist_j) * vmask[..., None]
    out.J_twist_h = chain(dp_twist_h, dt_twist_h) * vmask[..., None]
    out.J_d = (np.einsum("nki,nki->nk", gJ, dp_d + vel * dt_d[:, None, None])
               * vmask)

    # affine columns [a_host, b_host, a_target, b_target]
    J_aff = np.zeros((n, 8, 4))
    if affine_enabled:
        J_aff[..., 0] = gain * points.host_intensity
        J_aff[..., 1] = 1.0
        J_aff[..., 2] = -gain * points.host_intensity
        J_aff[..., 3] = -1.0
    out.J_affine = J_aff * vmask[..., None]
    out.residual = np.where(valid, r, 0.0)
    out.weight = np.where(valid, points.grad_weight, 0.0)
    return out


def huber_weights(residual: np.ndarray, k: float):
    """(energy_terms, irls_weights) of the Huber loss rho(r)."""
    a = np.abs(residual)
    quad = a <= k
    energy = np.where(quad, residual * residual, k * (2.0 * a - k))
    w = np.where(quad, 1.0, k / np.maximum(a, 1e-12))
    return energy, w


def pair_energy(obs: PairObservations, settings: PhotoSettings) -> float:
    e, _ = huber_weights(obs.residual, settings.huber_intensity)
    return float((obs.weight * e * obs.valid).sum())
