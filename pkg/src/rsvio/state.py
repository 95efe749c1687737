"""Per-keyframe optimization variables and the metric/non-metric frame chain.

Frames: metric world W_m, free-scaled world W_f, metric camera C_m,
free-scaled camera C_f, IMU I. The backend optimizes non-metric
world-to-camera poses T_CfWf; metric IMU poses are derived through the
scale/gravity variable T_WmWf (scale s + gravity-alignment rotation) and the
calibrated T_CmI. The conversion C_f -> C_m carries the same scale s and
identity rotation.

A keyframe's pose T_CfWf and timestamp refer to the mid-row capture instant
(t = 0 of the rolling-shutter time axis); the twist is expressed in the
camera frame, per row unit of that axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .lie import Pose3, ScaledRot

GRAVITY_WM = np.array([0.0, 0.0, -9.81])


@dataclass
class KeyframeState:
    timestamp: float
    T_CfWf: Pose3
    xi: np.ndarray = field(default_factory=lambda: np.zeros(6))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b: np.ndarray = field(default_factory=lambda: np.zeros(6))  # [accel, gyro]
    a_aff: float = 0.0
    b_aff: float = 0.0
    kf_id: int = -1

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float).reshape(6)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.b = np.asarray(self.b, dtype=float).reshape(6)

    @property
    def bias_accel(self) -> np.ndarray:
        return self.b[:3]

    @property
    def bias_gyro(self) -> np.ndarray:
        return self.b[3:]

    def copy(self) -> "KeyframeState":
        return KeyframeState(self.timestamp, Pose3(self.T_CfWf.R.copy(), self.T_CfWf.t.copy()),
                             self.xi.copy(), self.v.copy(), self.b.copy(),
                             self.a_aff, self.b_aff, self.kf_id)


@dataclass
class ScaleGravity:
    """The R+ x SO(3) variable T_WmWf."""

    T_WmWf: ScaledRot = field(default_factory=ScaledRot.identity)

    @property
    def s(self) -> float:
        return self.T_WmWf.s

    @property
    def R(self) -> np.ndarray:
        return self.T_WmWf.R

    def updated(self, dsigma: float, dpsi: np.ndarray) -> "ScaleGravity":
        from .lie import so3_exp
        return ScaleGravity(ScaledRot(self.s * float(np.exp(dsigma)),
                                      so3_exp(np.asarray(dpsi, dtype=float)) @ self.R))

    def copy(self) -> "ScaleGravity":
        return ScaleGravity(ScaledRot(self.s, self.R.copy()))


@dataclass
class Calibration:
    T_CmI: Pose3
    camera: CameraModel
    g: np.ndarray = field(default_factory=lambda: GRAVITY_WM.copy())

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).reshape(3)
        norm = float(np.linalg.norm(self.g))
        if not (9.5 <= norm <= 10.1):
            raise ValueError(f"gravity magnitude {norm:.3f} outside [9.5, 10.1] m/s^2")


def imu_pose_metric(kf: KeyframeState, sg: ScaleGravity, calib: Calibration) -> Pose3:
    """IMU-to-metric-world pose T_WmI = T_WmWf T_CfWf^-1 T_CfCm T_CmI.

    Closed form: R = R_WmWf R_CfWf^T R_CmI,
    p = R_WmWf R_CfWf^T (t_CmI - s t_CfWf); the scale factors of T_WmWf and
    T_CfCm cancel in the rotation.
    """
    R_cw = kf.T_CfWf.R
    t_cw = kf.T_CfWf.t
    R = sg.R @ R_cw.T @ calib.T_CmI.R
    p = sg.R @ (R_cw.T @ (calib.T_CmI.t - sg.s * t_cw))
    return Pose3(R, p)


def rotation_imu_from_world(kf: KeyframeState, sg: ScaleGravity,
                            calib: Calibration) -> np.ndarray:
    """R_IWm = R_CmI^-1 R_CmCf R_CfWf R_WmWf^-1 (R_CmCf is identity)."""
    return calib.T_CmI.R.T @ kf.T_CfWf.R @ sg.R.T


@dataclass
class MetricState:
    """IMU-side view of a keyframe: metric pose, velocity and bias."""

    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    b: np.ndarray
    timestamp: float


def metric_state(kf: KeyframeState, sg: ScaleGravity, calib: Calibration) -> MetricState:
    T = imu_pose_metric(kf, sg, calib)
    return MetricState(T.R, T.t, kf.v.copy(), kf.b.copy(), kf.timestamp)
