"""Full pipeline: dataset in, keyframe trajectory out.

Bootstraps gravity from the first accelerometer samples, tracks frames by
IMU prediction (optionally polished by direct alignment), manages keyframes
and the sliding window, and exports the optimized keyframe states. Poses are
estimated in the free-scaled world and converted to metric IMU poses with
the final scale/gravity estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..config import SolverConfig
from ..dataset_io import DatasetIndex
from ..lie import Pose3, so3_exp, so3_hat
from ..state import (Calibration, KeyframeState, MetricState, ScaleGravity,
                     imu_pose_metric, metric_state)
from ..lie import ScaledRot
from .frontend import (FrameTracker, coarse_align, epipolar_init,
                       frame_state_from_metric, init_twist_from_prior,
                       mean_flow, select_candidate_pixels)
from .priors import DualPrior
from .solver import (SolverAbort, marginalize_keyframe, maybe_switch_prior,
                     optimize_window, select_marginalization_victim)
from .window import Keyframe, Window
from ..photometric import PointBlock

log = logging.getLogger(__name__)


@dataclass
class KeyframeRecord:
    timestamp: float
    T_CfWf: Pose3
    v: np.ndarray
    b: np.ndarray
    scale_at_export: float


@dataclass
class OdometryResult:
    status: str
    timestamps: np.ndarray
    poses_imu: list[Pose3]
    velocities: np.ndarray
    biases: np.ndarray
    scale: float
    sg: ScaleGravity
    prior_switches: int = 0
    n_keyframes: int = 0
    diagnostics: dict = field(default_factory=dict)


def gravity_alignment_from_accel(mean_accel: np.ndarray, calib: Calibration
                                 ) -> np.ndarray:
    """Initial R_WmWf from the mean specific force of a (near-)static start.

    A stationary accelerometer measures -R^T g; the minimal rotation taking
    the measured direction onto -g fixes roll/pitch, leaving yaw free.
    """
    f = np.asarray(mean_accel, dtype=float)
    if np.linalg.norm(f) < 1e-6:
        return np.eye(3)
    a = f / np.linalg.norm(f)
    b = -calib.g / np.linalg.norm(calib.g)   # want (R_w R_ci) a = b
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if np.linalg.norm(v) < 1e-12:
        U = np.eye(3) if c > 0 else so3_exp(np.array([np.pi, 0, 0]))
    else:
        vx = so3_hat(v)
        U = np.eye(3) + vx + vx @ vx * (1.0 / (1.0 + c))
    return U @ calib.T_CmI.R.T


class Odometry:
    def __init__(self, dataset: DatasetIndex, config: SolverConfig,
                 mode: str = "rs", stream: str | None = None, seed: int = 0):
        if mode not in ("rs", "gs-assume"):
            raise ValueError("mode must be 'rs' or 'gs-assume'")
        self.dataset = dataset
        self.config = config.validate()
        self.mode = mode
        self.stream = stream or dataset.streams[0]
        self.calib = dataset.calib[self.stream]
        self.rng = np.random.default_rng(seed)
        self.window = Window(calib=self.calib, config=config,
                             rs_enabled=(mode == "rs"), noise=dataset.noise)
        self.tracker = FrameTracker(self.window, dataset.imu, self.rng)
        self.records: list[KeyframeRecord] = []
        self.scale_history: list[float] = []
        self.frames = dataset.frames(self.stream)
        self._candidates_per_kf = max(
            24, config.point_budget // config.max_keyframes)

    # ------------------------------------------------------------------
    def bootstrap(self, entry, image: np.ndarray):
        imu = self.dataset.imu
        n0 = min(40, len(imu) - 1)
        mean_accel = imu.a[:n0].mean(axis=0)
        R_w = gravity_alignment_from_accel(mean_accel, self.calib)
        self.window.sg = ScaleGravity(ScaledRot(1.0, R_w))

        state = KeyframeState(timestamp=entry.timestamp,
                              T_CfWf=Pose3.identity(), kf_id=0)
        gyro = imu.gyro_at(entry.timestamp)
        init_twist_from_prior(state, self.window, gyro)
        kf = Keyframe(state=state, image=image, gyro=gyro,
                      mean_intensity=float(image.mean()))
        kf.candidates = select_candidate_pixels(
            image, self._candidates_per_kf, self.rng,
            grid=self.config.selection_grid)
        self.window.add_keyframe(kf, None)
        self.window.priors = DualPrior.bootstrap(
            state, self.window.sg, self.config.gauge_pose_weight,
            self.config.gauge_scale_weight, self.config.gauge_gravity_weight)
        self.tracker.current = metric_state(state, self.window.sg, self.calib)
        self.tracker.last_time = entry.timestamp
        self.tracker.last_kf_time = entry.timestamp
        self.tracker.next_kf_id = 1

    # ------------------------------------------------------------------
    def _mature_points(self, new_kf_state: KeyframeState,
                       new_image: np.ndarray):
        """Depth-initialize pending candidates against the incoming keyframe.

        Candidates stay pending until the baseline to some newer keyframe
        makes their depths observable (epipolar gates pass).
        """
        for kf in self.window.keyframes:
            if kf.points is not None or kf.candidates is None:
                continue
            if len(kf.candidates) == 0:
                kf.candidates = None
                continue
            uv, inv_d, _ = epipolar_init(
                kf.state, new_kf_state, self.window.cam, kf.image, new_image,
                kf.candidates,
                (self.config.inv_depth_min, self.config.inv_depth_max),
                self.config.epipolar_steps, self.config.epipolar_ssd_max,
                self.window.rs_enabled, self.window.photo_settings(),
                min_search_px=self.config.epipolar_min_search_px)
            if len(uv) < 24:
                continue  # not enough parallax yet; try the next keyframe
            kf.candidates = None
            kf.points = PointBlock(kf.state.kf_id, uv, inv_d, self.window.cam,
                                   kf.image, self.window.rs_enabled,
                                   self.window.photo_settings())
            log.debug("keyframe %d matured %d points", kf.state.kf_id, len(uv))

    def _export_keyframe(self, kf: Keyframe):
        self.records.append(KeyframeRecord(
            timestamp=kf.state.timestamp,
            T_CfWf=Pose3(kf.state.T_CfWf.R.copy(), kf.state.T_CfWf.t.copy()),
            v=kf.state.v.copy(), b=kf.state.b.copy(),
            scale_at_export=self.window.sg.s))

    def _make_keyframe(self, entry, image, state: KeyframeState):
        state.kf_id = self.tracker.next_kf_id
        self.tracker.next_kf_id += 1
        gyro = self.dataset.imu.gyro_at(entry.timestamp)
        init_twist_from_prior(state, self.window, gyro)
        self._mature_points(state, image)
        kf = Keyframe(state=state, image=image, gyro=gyro,
                      mean_intensity=float(image.mean()))
        kf.candidates = select_candidate_pixels(
            image, self._candidates_per_kf, self.rng,
            grid=self.config.selection_grid)
        self.window.add_keyframe(kf, self.dataset.imu)

        optimize_window(self.window)
        maybe_switch_prior(self.window)
        victim = select_marginalization_victim(self.window)
        if victim is not None:
            self._export_keyframe(self.window.kf_by_id(victim))
            marginalize_keyframe(self.window, victim)
        self.scale_history.append(self.window.sg.s)

        newest = self.window.keyframes[-1].state
        self.tracker.current = metric_state(newest, self.window.sg, self.calib)
        self.tracker.last_time = newest.timestamp
        self.tracker.last_kf_time = newest.timestamp

    # ------------------------------------------------------------------
    def process(self, entry, image: np.ndarray):
        if not self.window.keyframes:
            self.bootstrap(entry, image)
            return
        t = entry.timestamp
        ms = self.tracker.propagate(t)
        state = frame_state_from_metric(ms, self.window)
        gyro = self.dataset.imu.gyro_at(t)
        init_twist_from_prior(state, self.window, gyro)
        have_points = any(kf.points is not None and len(kf.points) > 0
                          for kf in self.window.keyframes)
        if self.config.coarse_align and have_points:
            state = coarse_align(self.window, state, image,
                                 self.config.coarse_align_iterations)
            ms = MetricState(*_metric_of(state, self.window), ms.b, t)

        dt_kf = t - self.tracker.last_kf_time
        flow = mean_flow(self.window, state, image.shape) if have_points else 0.0
        bright = abs(np.log(max(image.mean(), 1e-6)
                            / max(self.window.keyframes[-1].mean_intensity, 1e-6)))
        make_kf = False
        reason = ""
        if dt_kf >= self.config.kf_min_interval_s:
            if not have_points and dt_kf >= self.config.kf_max_interval_s:
                make_kf, reason = True, "interval"
            elif flow >= self.config.kf_flow_threshold_px:
                make_kf, reason = True, "flow"
            elif bright >= self.config.kf_brightness_threshold:
                make_kf, reason = True, "brightness"
            elif dt_kf >= self.config.kf_max_interval_s:
                make_kf, reason = True, "interval"
        if make_kf:
            log.debug("keyframe at t=%.3f (%s, flow %.1f px)", t, reason, flow)
            self._make_keyframe(entry, image, state)
        else:
            self.tracker.current = ms
            self.tracker.last_time = t

        if not np.isfinite(self.window.sg.s):
            raise SolverAbort("scale estimate diverged")

    # ------------------------------------------------------------------
    def finish(self) -> OdometryResult:
        for kf in self.window.keyframes:
            self._export_keyframe(kf)
        self.records.sort(key=lambda r: r.timestamp)
        sg = self.window.sg
        poses = []
        for rec in self.records:
            state = KeyframeState(timestamp=rec.timestamp, T_CfWf=rec.T_CfWf,
                                  v=rec.v, b=rec.b)
            poses.append(imu_pose_metric(state, sg, self.calib))
        return OdometryResult(
            status="ok",
            timestamps=np.array([r.timestamp for r in self.records]),
            poses_imu=poses,
            velocities=np.array([r.v for r in self.records]),
            biases=np.array([r.b for r in self.records]),
            scale=sg.s, sg=sg,
            prior_switches=self.window.priors.switches if self.window.priors else 0,
            n_keyframes=len(self.records))

    def run(self) -> OdometryResult:
        try:
            for entry in self.frames:
                image = self.dataset.load_image(entry)
                self.process(entry, image)
        except (SolverAbort, FloatingPointError, np.linalg.LinAlgError) as e:
            log.error("odometry diverged: %s", e)
            result = self.finish()
            result.status = "diverged"
            result.diagnostics["error"] = str(e)
            return result
        return self.finish()


def _metric_of(state: KeyframeState, window: Window):
    T = imu_pose_metric(state, window.sg, window.calib)
    return T.R, T.t, state.v


def run_odometry(dataset: DatasetIndex, config: SolverConfig,
                 mode: str = "rs", stream: str | None = None,
                 seed: int = 0) -> OdometryResult:
    """End-to-end odometry on a dataset; deterministic for a fixed seed."""
    return Odometry(dataset, config, mode=mode, stream=stream, seed=seed).run()
