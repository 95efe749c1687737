"""Backend configuration: one documented schema, file-loadable, overridable."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import yaml


@dataclass
class SolverConfig:
    # energy balancing
    alpha: float = 1.0                  # weight of the inertial energy
    beta: float = 1.0                   # weight of the twist-coupling energy
    huber_intensity: float = 9.0        # photometric Huber threshold (0..255)
    # twist prior weights in per-second twist units (converted to row units
    # internally by 1/row_time^2)
    twist_weight_translation: float = 1e2
    twist_weight_rotation: float = 1e2

    # window
    max_keyframes: int = 7
    point_budget: int = 2000            # active points across the window
    max_kf_age_s: float = 4.0           # force-marginalize older keyframes

    # Gauss-Newton / Levenberg-Marquardt
    gn_max_iterations: int = 10
    lm_lambda_init: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.2
    lm_lambda_max: float = 1e8
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10

    # dual marginalization prior
    scale_switch_threshold: float = 0.1  # |log(s/s_lin)| that triggers a switch

    # gauge / regularization. The split between the free visual scale and
    # the metric scale variable is conventional (depths are seeded from
    # IMU-consistent geometry), so log-scale carries a soft prior; the
    # gravity-alignment rotation stays nearly free (observable).
    gauge_pose_weight: float = 1e8
    gauge_scale_weight: float = 1e5
    gauge_gravity_weight: float = 1e-2
    freeze_scale_gravity: bool = False  # pin the scale/gravity variable
    affine_enabled: bool = False
    affine_prior_weight: float = 1e-2

    # keyframe policy
    kf_flow_threshold_px: float = 12.0
    kf_max_interval_s: float = 0.45
    kf_min_interval_s: float = 0.1
    kf_brightness_threshold: float = 0.25

    # point management
    inv_depth_min: float = 0.02
    inv_depth_max: float = 2.5
    epipolar_steps: int = 128
    epipolar_min_search_px: float = 10.0
    epipolar_ssd_max: float = 400.0     # mean squared intensity over pattern
    outlier_intensity: float = 25.0     # |median residual| above this drops an obs
    selection_grid: int = 16            # cells per image side for quotas

    # tracking
    coarse_align: bool = True
    coarse_align_levels: int = 2
    coarse_align_iterations: int = 4

    # evaluation of residuals
    workers: int = 1

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("energy weights must be non-negative")
        if self.max_keyframes < 2:
            raise ValueError("need at least two keyframes in the window")
        if self.point_budget < 8:
            raise ValueError("point budget too small")
        if self.scale_switch_threshold <= 0:
            raise ValueError("scale switch threshold must be positive")
        return self


def load_config(path) -> SolverConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of config keys")
    known = {f.name for f in fields(SolverConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    return SolverConfig(**data).validate()


def save_config(path, cfg: SolverConfig):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(asdict(cfg), f, sort_keys=True)


def apply_overrides(cfg: SolverConfig, overrides: list[str]) -> SolverConfig:
    """Apply KEY=VALUE strings (CLI flags win over file values)."""
    data = asdict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not KEY=VALUE")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in data:
            raise ValueError(f"unknown config key '{key}'")
        data[key] = yaml.safe_load(raw)
    return SolverConfig(**data).validate()
