"""Sliding-window visual-inertial backend."""

from .odometry import Odometry, OdometryResult, run_odometry
from .priors import DualPrior, PriorBlock, schur_complement
from .solver import (OptReport, SolverAbort, imu_energy, marginalize_keyframe,
                     maybe_switch_prior, optimize_window, photometric_energy,
                     select_marginalization_victim, twist_energy)
from .window import Keyframe, Layout, Window

__all__ = [
    "Odometry", "OdometryResult", "run_odometry",
    "DualPrior", "PriorBlock", "schur_complement",
    "OptReport", "SolverAbort", "imu_energy", "marginalize_keyframe",
    "maybe_switch_prior", "optimize_window", "photometric_energy",
    "twist_energy", "select_marginalization_victim",
    "Keyframe", "Layout", "Window",
]
