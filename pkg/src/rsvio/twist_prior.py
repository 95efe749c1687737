"""Coupling between per-keyframe twists and the IMU state.

The metric IMU twist is assembled from the estimated velocity (rotated into
the IMU frame) and the bias-corrected gyro sample at the keyframe mid-time.
The adjoint of the camera-IMU extrinsic converts it into a camera-frame
twist; dividing the translational part by the scale and multiplying by the
per-row readout time yields a prior for the non-metric, row-unit twist the
rolling-shutter model uses. The energy penalizes the weighted squared
deviation of each keyframe's twist variable from this prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import so3_hat
from .state import Calibration, KeyframeState, ScaleGravity, rotation_imu_from_world


@dataclass
class TwistPriorTerm:
    kf_id: int
    omega: np.ndarray          # gyro at the keyframe mid-time, rad/s
    xi_prior: np.ndarray       # row-unit twist prior
    weight: np.ndarray         # diagonal of the 6x6 weight matrix

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.xi_prior = np.asarray(self.xi_prior, dtype=float).reshape(6)
        self.weight = np.asarray(self.weight, dtype=float).reshape(6)
        if np.any(self.weight <= 0):
            raise ValueError("twist prior weights must be positive")


def imu_twist(kf: KeyframeState, sg: ScaleGravity, calib: Calibration,
              omega: np.ndarray) -> np.ndarray:
    """Metric per-second twist of the IMU: [R_IWm v, omega - b_g]."""
    R_IWm = rotation_imu_from_world(kf, sg, calib)
    return np.concatenate([R_IWm @ kf.v, np.asarray(omega, dtype=float) - kf.bias_gyro])


def camera_twist(xi_imu: np.ndarray, calib: Calibration) -> np.ndarray:
    """Convert an IMU twist to the camera frame: -Adj(T_CmI) xi_imu."""
    return -(calib.T_CmI.adjoint() @ np.asarray(xi_imu, dtype=float))


def prior_twist(xi_cam: np.ndarray, s: float, t_d: float) -> np.ndarray:
    """Rescale a metric per-second camera twist to non-metric row units."""
    if not s > 0:
        raise ValueError("scale must be positive")
    xi_cam = np.asarray(xi_cam, dtype=float)
    return t_d * np.concatenate([xi_cam[:3] / s, xi_cam[3:]])


def twist_prior_for_keyframe(kf: KeyframeState, sg: ScaleGravity,
                             calib: Calibration, omega: np.ndarray) -> np.ndarray:
    xi_i = imu_twist(kf, sg, calib, omega)
    xi_c = camera_twist(xi_i, calib)
    return prior_twist(xi_c, sg.s, calib.camera.row_time_td)


def twist_residual(kf: KeyframeState, sg: ScaleGravity, calib: Calibration,
                   omega: np.ndarray) -> np.ndarray:
    """6-vector deviation (prior twist - twist variable)."""
    return twist_prior_for_keyframe(kf, sg, calib, omega) - kf.xi


def twist_residual_jacobians(kf: KeyframeState, sg: ScaleGravity,
                             calib: Calibration, omega: np.ndarray
                             ) -> dict[str, np.ndarray]:
    """Jacobians of the 6-vector twist residual.

    Keys: xi (6x6), v (6x3), b (6x6 accel-first, only gyro columns used),
    pose (6x6, [rho, phi] of the left increment on T_CfWf), sg (6x4,
    [dlog s, dpsi]).
    """
    t_d = calib.camera.row_time_td
    s = sg.s
    R_ci = calib.T_CmI.R
    t_ci_hat = so3_hat(calib.T_CmI.t)
    R_cw = kf.T_CfWf.R
    # translational prior rows: -(t_d/s) (R_cw R_w^T v + hat(t_ci) R_ci (w - b_g))
    u = R_cw @ (sg.R.T @ kf.v)

    J = {"xi": -np.eye(6),
         "v": np.zeros((6, 3)),
         "b": np.zeros((6, 6)),
         "pose": np.zeros((6, 6)),
         "sg": np.zeros((6, 4))}

    J["v"][0:3, :] = -(t_d / s) * R_cw @ sg.R.T
    J["b"][0:3, 3:6] = (t_d / s) * t_ci_hat @ R_ci
    J["b"][3:6, 3:6] = t_d * R_ci
    J["pose"][0:3, 3:6] = (t_d / s) * so3_hat(u)
    J["sg"][0:3, 1:4] = -(t_d / s) * R_cw @ sg.R.T @ so3_hat(kf.v)
    xi_prior = twist_prior_for_keyframe(kf, sg, calib, omega)
    J["sg"][0:3, 0] = -xi_prior[:3]
    return J


def twist_energy(kfs, sg: ScaleGravity, calib: Calibration, gyro_lookup,
                 weight: np.ndarray):
    """Total twist-coupling energy over keyframes.

    ``gyro_lookup(t)`` returns the interpolated gyro sample at time t and
    must cover every keyframe timestamp. Returns (energy, terms) where each
    term carries (kf, residual, jacobians, weight diag).
    """
    weight = np.asarray(weight, dtype=float).reshape(6)
    energy = 0.0
    terms = []
    for kf in kfs:
        omega = gyro_lookup(kf.timestamp)
        r = twist_residual(kf, sg, calib, omega)
        J = twist_residual_jacobians(kf, sg, calib, omega)
        energy += float(r @ (weight * r))
        terms.append((kf, r, J, weight))
    return energy, terms
