"""On-manifold IMU preintegration between keyframes.

Relative-motion deltas (dR, dv, dp) are accumulated in the frame of the
first keyframe, independent of the absolute state; gravity enters only in
the state prediction. Bias dependence is kept to first order through the
accumulated bias Jacobians, and a 9x9 covariance over [rotation, velocity,
position] errors is propagated alongside.

Residuals compare predictions against the metric IMU states derived from the
optimized camera poses, so their Jacobians include the scale and
gravity-alignment variables of that conversion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .lie import so3_exp, so3_hat, so3_left_jacobian_inv, so3_log, so3_right_jacobian
from .state import Calibration, MetricState

log = logging.getLogger(__name__)

# Bias excursions beyond these trigger a full re-preintegration; first-order
# corrections stay below the residual noise floor inside them.
BIAS_GYRO_REINT_THRESHOLD = 1e-2   # rad/s
BIAS_ACCEL_REINT_THRESHOLD = 1e-1  # m/s^2


class BiasDeviationError(ValueError):
    """Bias moved too far from the preintegration linearization point."""


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities (BMI160-class MEMS defaults)."""

    sigma_gyro: float = 2e-4        # rad/s/sqrt(Hz)
    sigma_accel: float = 2e-3       # m/s^2/sqrt(Hz)
    sigma_gyro_bias_rw: float = 2e-5   # rad/s^2/sqrt(Hz)
    sigma_accel_bias_rw: float = 2e-4  # m/s^3/sqrt(Hz)


@dataclass(frozen=True)
class PreintSettings:
    # False reproduces the simplified position update without the
    # 0.5 * dR * (a - b_a) * dt^2 term.
    include_accel_in_position: bool = True
    # False reproduces the non-accumulating rotation update (the literal
    # single-step reading); standard preintegration accumulates.
    accumulate_rotation: bool = True


class ImuData:
    """Time-sorted IMU stream with interpolation helpers."""

    def __init__(self, timestamps, gyro, accel):
        self.t = np.asarray(timestamps, dtype=float).reshape(-1)
        self.w = np.asarray(gyro, dtype=float).reshape(-1, 3)
        self.a = np.asarray(accel, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.w) == len(self.a)):
            raise ValueError("IMU stream arrays disagree in length")
        if len(self.t) >= 2 and not np.all(np.diff(self.t) > 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def covers(self, t0: float, t1: float) -> bool:
        return len(self.t) >= 2 and self.t[0] <= t0 and t1 <= self.t[-1]

    def sample_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Linear interpolation of (gyro, accel) at time t."""
        if not (self.t[0] <= t <= self.t[-1]):
            raise ValueError(f"time {t} outside IMU coverage "
                             f"[{self.t[0]}, {self.t[-1]}]")
        i = int(np.searchsorted(self.t, t, side="right") - 1)
        i = min(max(i, 0), len(self.t) - 2)
        dt = self.t[i + 1] - self.t[i]
        u = (t - self.t[i]) / dt
        return ((1 - u) * self.w[i] + u * self.w[i + 1],
                (1 - u) * self.a[i] + u * self.a[i + 1])

    def gyro_at(self, t: float) -> np.ndarray:
        return self.sample_at(t)[0]

    def segment(self, t0: float, t1: float) -> "ImuData":
        """Samples covering [t0, t1] with interpolated endpoint samples."""
        if t1 <= t0:
            raise ValueError("empty IMU segment requested")
        if not self.covers(t0, t1):
            raise ValueError(f"IMU stream does not cover [{t0}, {t1}]")
        inside = (self.t > t0 + 1e-12) & (self.t < t1 - 1e-12)
        ts = [t0] + list(self.t[inside]) + [t1]
        ws, accs = [], []
        for t in ts:
            w, a = self.sample_at(t)
            ws.append(w)
            accs.append(a)
        return ImuData(np.array(ts), np.array(ws), np.array(accs))


@dataclass
class Preintegrated:
    dR: np.ndarray = field(default_factory=lambda: np.eye(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    J_R_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))  # [phi, v, p]
    bias_lin: np.ndarray = field(default_factory=lambda: np.zeros(6))  # [accel, gyro]
    dt_total: float = 0.0
    noise: ImuNoise = field(default_factory=ImuNoise)
    settings: PreintSettings = field(default_factory=PreintSettings)


def integrate(preint: Preintegrated, gyro: np.ndarray, accel: np.ndarray,
              dt: float) -> Preintegrated:
    """One integration step with the sample held constant over dt."""
    if not (dt > 0.0) or not np.all(np.isfinite(gyro)) or not np.all(np.isfinite(accel)):
        raise ValueError("integration step needs dt > 0 and finite samples")
    ba = preint.bias_lin[:3]
    bg = preint.bias_lin[3:]
    w = np.asarray(gyro, dtype=float) - bg
    a = np.asarray(accel, dtype=float) - ba

    dR, dv, dp = preint.dR, preint.dv, preint.dp
    Rinc = so3_exp(w * dt)
    Jr = so3_right_jacobian(w * dt)
    a_hat = so3_hat(a)
    dRa = dR @ a

    dp_new = dp + dv * dt
    if preint.settings.include_accel_in_position:
        dp_new = dp_new + 0.5 * dRa * dt * dt
    dv_new = dv + dRa * dt
    dR_new = dR @ Rinc if preint.settings.accumulate_rotation else Rinc

    # bias Jacobians (first-order, accumulated at the linearization bias)
    J_R_bg = Rinc.T @ preint.J_R_bg - Jr * dt
    J_v_ba = preint.J_v_ba - dR * dt
    J_v_bg = preint.J_v_bg - dR @ a_hat @ preint.J_R_bg * dt
    J_p_ba = preint.J_p_ba + preint.J_v_ba * dt - 0.5 * dR * dt * dt
    J_p_bg = preint.J_p_bg + preint.J_v_bg * dt - 0.5 * dR @ a_hat @ preint.J_R_bg * dt * dt

    # covariance propagation over [phi, v, p]
    F = np.eye(9)
    F[0:3, 0:3] = Rinc.T
    F[3:6, 0:3] = -dR @ a_hat * dt
    F[6:9, 0:3] = -0.5 * dR @ a_hat * dt * dt
    F[6:9, 3:6] = np.eye(3) * dt
    G = np.zeros((9, 6))
    G[0:3, 0:3] = Jr * dt
    G[3:6, 3:6] = dR * dt
    G[6:9, 3:6] = 0.5 * dR * dt * dt
    sg2 = preint.noise.sigma_gyro ** 2 / dt
    sa2 = preint.noise.sigma_accel ** 2 / dt
    Qd = np.diag([sg2, sg2, sg2, sa2, sa2, sa2])
    cov = F @ preint.cov @ F.T + G @ Qd @ G.T
    cov = 0.5 * (cov + cov.T)

    return replace(preint, dR=dR_new, dv=dv_new, dp=dp_new,
                   J_R_bg=J_R_bg, J_v_ba=J_v_ba, J_v_bg=J_v_bg,
                   J_p_ba=J_p_ba, J_p_bg=J_p_bg, cov=cov,
                   dt_total=preint.dt_total + dt)


def integrate_stream(segment: ImuData, bias_lin: np.ndarray,
                     noise: ImuNoise | None = None,
                     settings: PreintSettings | None = None) -> Preintegrated:
    """Preintegrate a sample segment, averaging consecutive samples.

    Consecutive samples are averaged (trapezoid rule) and the averaged
    specific force is pre-rotated by half the raw incremental rotation,
    which the start-of-interval rotation of the single-step update would
    otherwise miss. Together this makes zero-noise streams of smooth motions
    integrate back to the trajectory at second order in the sample spacing.
    The pre-rotation deliberately ignores the bias (a second-order effect)
    so the update's bias dependence stays exactly what the accumulated bias
    Jacobians model.
    """
    preint = Preintegrated(bias_lin=np.asarray(bias_lin, dtype=float).reshape(6).copy(),
                           noise=noise or ImuNoise(),
                           settings=settings or PreintSettings())
    for k in range(len(segment) - 1):
        dt = segment.t[k + 1] - segment.t[k]
        w = 0.5 * (segment.w[k] + segment.w[k + 1])
        a = 0.5 * (segment.a[k] + segment.a[k + 1])
        a_mid = so3_exp(w * (0.5 * dt)) @ a
        preint = integrate(preint, w, a_mid, dt)
    return preint


def needs_reintegration(preint: Preintegrated, b: np.ndarray) -> bool:
    db = np.asarray(b, dtype=float).reshape(6) - preint.bias_lin
    return (np.linalg.norm(db[3:]) > BIAS_GYRO_REINT_THRESHOLD
            or np.linalg.norm(db[:3]) > BIAS_ACCEL_REINT_THRESHOLD)


def correct_bias(preint: Preintegrated, b: np.ndarray, check: bool = True):
    """First-order corrected deltas (dR(b), dv(b), dp(b))."""
    db = np.asarray(b, dtype=float).reshape(6) - preint.bias_lin
    if check and needs_reintegration(preint, b):
        raise BiasDeviationError(
            "bias moved beyond the first-order validity range; re-preintegrate")
    dba, dbg = db[:3], db[3:]
    dR = preint.dR @ so3_exp(preint.J_R_bg @ dbg)
    dv = preint.dv + preint.J_v_ba @ dba + preint.J_v_bg @ dbg
    dp = preint.dp + preint.J_p_ba @ dba + preint.J_p_bg @ dbg
    return dR, dv, dp


def predict_state(s_i: MetricState, preint: Preintegrated, g: np.ndarray,
                  t_i: float, t_j: float, check_bias: bool = True):
    """Predicted (R_j, p_j, v_j) from state i and the preintegrated deltas."""
    dt = t_j - t_i
    dR, dv, dp = correct_bias(preint, s_i.b, check=check_bias)
    R_hat = s_i.R @ dR
    p_hat = s_i.p + dt * s_i.v + 0.5 * dt * dt * np.asarray(g, dtype=float) + s_i.R @ dp
    v_hat = s_i.v + dt * np.asarray(g, dtype=float) + s_i.R @ dv
    return R_hat, p_hat, v_hat


def imu_residuals(s_i: MetricState, s_j: MetricState, preint: Preintegrated,
                  g: np.ndarray, check_bias: bool = True) -> np.ndarray:
    """15-vector [r_dR, r_dv, r_dp, r_b]."""
    dt = s_j.timestamp - s_i.timestamp
    g = np.asarray(g, dtype=float)
    dR, dv, dp = correct_bias(preint, s_i.b, check=check_bias)
    r_R = so3_log(dR.T @ s_i.R.T @ s_j.R)
    r_v = s_i.R.T @ (s_j.v - s_i.v - dt * g) - dv
    r_p = s_i.R.T @ (s_j.p - s_i.p - dt * s_i.v - 0.5 * dt * dt * g) - dp
    r_b = s_j.b - s_i.b
    return np.concatenate([r_R, r_v, r_p, r_b])


def imu_residual_jacobians(s_i: MetricState, s_j: MetricState,
                           preint: Preintegrated, g: np.ndarray,
                           calib: Calibration, sg_s: float,
                           A_i: np.ndarray, A_j: np.ndarray,
                           t_cw_i: np.ndarray, t_cw_j: np.ndarray,
                           check_bias: bool = True) -> dict[str, np.ndarray]:
    """Jacobians of the 15-vector residual.

    Keys: pose_i/pose_j (15x6, columns [rho, phi] of the left increment on
    T_CfWf), v_i/v_j (15x3), b_i/b_j (15x6 accel-first), sg (15x4, columns
    [dlog s, dpsi]). A_k = R_WmWf R_CfWf,k^T; t_cw_k is the translation of
    T_CfWf,k.
    """
    dt = s_j.timestamp - s_i.timestamp
    g = np.asarray(g, dtype=float)
    db = s_i.b - preint.bias_lin
    dR_c, dv_c, dp_c = correct_bias(preint, s_i.b, check=check_bias)
    r = imu_residuals(s_i, s_j, preint, g, check_bias=check_bias)
    r_R, r_v, r_p = r[0:3], r[3:6], r[6:9]

    R_i, R_j = s_i.R, s_j.R
    R_ci = calib.T_CmI.R
    t_ci = calib.T_CmI.t
    Jl_inv = so3_left_jacobian_inv(r_R)
    Jr_inv = so3_left_jacobian_inv(-r_R)

    J = {k: np.zeros((15, d)) for k, d in
         (("pose_i", 6), ("pose_j", 6), ("v_i", 3), ("v_j", 3),
          ("b_i", 6), ("b_j", 6), ("sg", 4))}

    w_vec = s_j.v - s_i.v - dt * g

    # rotation residual
    J["pose_i"][0:3, 3:6] = Jl_inv @ dR_c.T @ R_ci.T
    J["pose_j"][0:3, 3:6] = -Jr_inv @ R_ci.T
    from .lie import so3_left_jacobian
    J["b_i"][0:3, 3:6] = -Jl_inv @ so3_left_jacobian(-preint.J_R_bg @ db[3:]) @ preint.J_R_bg

    # velocity residual
    J["v_i"][3:6, :] = -R_i.T
    J["v_j"][3:6, :] = R_i.T
    J["pose_i"][3:6, 3:6] = -so3_hat(r_v + dv_c) @ R_ci.T
    J["b_i"][3:6, 0:3] = -preint.J_v_ba
    J["b_i"][3:6, 3:6] = -preint.J_v_bg
    J["sg"][3:6, 1:4] = R_i.T @ so3_hat(w_vec)

    # position residual
    J["pose_i"][6:9, 0:3] = sg_s * R_i.T @ A_i
    J["pose_i"][6:9, 3:6] = (-R_i.T @ A_i @ so3_hat(t_ci)
                             - so3_hat(r_p + dp_c) @ R_ci.T)
    J["pose_j"][6:9, 0:3] = -sg_s * R_i.T @ A_j
    J["pose_j"][6:9, 3:6] = R_i.T @ A_j @ so3_hat(t_ci)
    J["v_i"][6:9, :] = -dt * R_i.T
    J["b_i"][6:9, 0:3] = -preint.J_p_ba
    J["b_i"][6:9, 3:6] = -preint.J_p_bg
    J["sg"][6:9, 0:1] = (-sg_s * R_i.T @ (A_j @ t_cw_j - A_i @ t_cw_i))[:, None]
    J["sg"][6:9, 1:4] = -R_i.T @ so3_hat(dt * s_i.v + 0.5 * dt * dt * g)

    # bias residual
    J["b_i"][9:15, :] = -np.eye(6)
    J["b_j"][9:15, :] = np.eye(6)
    return J


def information_matrix(preint: Preintegrated, cov_floor: float = 1e-12) -> np.ndarray:
    """15x15 information of [r_dR, r_dv, r_dp, r_b].

    The preintegration covariance is inverted with a diagonal floor; the bias
    rows use the random-walk covariance over the accumulated interval.
    """
    cov = preint.cov.copy()
    eig_min = float(np.linalg.eigvalsh(cov).min()) if preint.dt_total > 0 else 0.0
    if eig_min < cov_floor:
        log.debug("preintegration covariance floored (min eig %.3e)", eig_min)
        cov = cov + np.eye(9) * cov_floor
    info = np.zeros((15, 15))
    info[:9, :9] = np.linalg.inv(cov)
    dt = max(preint.dt_total, 1e-9)
    var_ba = preint.noise.sigma_accel_bias_rw ** 2 * dt
    var_bg = preint.noise.sigma_gyro_bias_rw ** 2 * dt
    info[9:12, 9:12] = np.eye(3) / max(var_ba, cov_floor)
    info[12:15, 12:15] = np.eye(3) / max(var_bg, cov_floor)
    return 0.5 * (info + info.T)
