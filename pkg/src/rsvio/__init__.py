"""Direct visual-inertial odometry for rolling-shutter cameras."""

__version__ = "0.1.0"

from .lie import Pose3, ScaledRot, exp_se3, log_se3, adjoint, apply_scaled_rot

__all__ = [
    "Pose3",
    "ScaledRot",
    "exp_se3",
    "log_se3",
    "adjoint",
    "apply_scaled_rot",
    "__version__",
]
