"""Sliding window of keyframes and the flat variable layout of its solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..camera import CameraModel
from ..config import SolverConfig
from ..imu import ImuData, ImuNoise, Preintegrated, integrate_stream
from ..lie import Pose3, se3_exp
from ..photometric import PhotoSettings, PointBlock
from ..state import Calibration, KeyframeState, ScaleGravity
from .priors import AFFINE, BIAS, KF_DIM, POSE, SG_DIM, TWIST, VEL, DualPrior


@dataclass
class Keyframe:
    state: KeyframeState
    image: np.ndarray
    gyro: np.ndarray                        # interpolated at the mid-row time
    points: PointBlock | None = None
    candidates: np.ndarray | None = None    # pixels awaiting depth init
    mean_intensity: float = 0.0


@dataclass
class ImuFactor:
    id_i: int
    id_j: int
    preint: Preintegrated
    segment: ImuData


@dataclass
class Window:
    calib: Calibration
    config: SolverConfig
    rs_enabled: bool = True
    sg: ScaleGravity = field(default_factory=ScaleGravity)
    keyframes: list[Keyframe] = field(default_factory=list)
    imu_factors: list[ImuFactor] = field(default_factory=list)
    priors: DualPrior | None = None
    noise: ImuNoise = field(default_factory=ImuNoise)

    @property
    def cam(self) -> CameraModel:
        return self.calib.camera

    @property
    def twists_active(self) -> bool:
        return self.rs_enabled and self.cam.row_time_td > 0.0

    def photo_settings(self) -> PhotoSettings:
        return PhotoSettings(huber_intensity=self.config.huber_intensity)

    def kf_by_id(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.state.kf_id == kf_id:
                return kf
        raise KeyError(f"keyframe {kf_id} not in window")

    def states(self) -> list[KeyframeState]:
        return [kf.state for kf in self.keyframes]

    def current_values(self) -> dict:
        vals = {("kf", kf.state.kf_id): kf.state for kf in self.keyframes}
        vals[("sg",)] = self.sg
        return vals

    def add_keyframe(self, kf: Keyframe, imu_stream: ImuData | None):
        if self.keyframes:
            prev = self.keyframes[-1].state
            if kf.state.timestamp <= prev.timestamp:
                raise ValueError("keyframe timestamps must increase")
            if imu_stream is not None:
                seg = imu_stream.segment(prev.timestamp, kf.state.timestamp)
                preint = integrate_stream(seg, prev.b, self.noise)
                self.imu_factors.append(
                    ImuFactor(prev.kf_id, kf.state.kf_id, preint, seg))
        self.keyframes.append(kf)

    def reintegrate_if_needed(self):
        from ..imu import needs_reintegration
        states = {kf.state.kf_id: kf.state for kf in self.keyframes}
        for fac in self.imu_factors:
            s_i = states.get(fac.id_i)
            if s_i is not None and needs_reintegration(fac.preint, s_i.b):
                fac.preint = integrate_stream(fac.segment, s_i.b, self.noise)

    def remove_keyframe(self, kf_id: int):
        self.keyframes = [kf for kf in self.keyframes if kf.state.kf_id != kf_id]
        self.imu_factors = [f for f in self.imu_factors
                            if kf_id not in (f.id_i, f.id_j)]

    def pair_factors(self) -> list[ImuFactor]:
        alive = {kf.state.kf_id for kf in self.keyframes}
        return [f for f in self.imu_factors if f.id_i in alive and f.id_j in alive]


class Layout:
    """Flat ordering: one 23-dim block per keyframe, then the 4-dim sg block,
    then one column per active point (host order)."""

    def __init__(self, window: Window, affine_enabled: bool):
        self.kf_ids = [kf.state.kf_id for kf in window.keyframes]
        self.offsets = {("kf", i): k * KF_DIM for k, i in enumerate(self.kf_ids)}
        self.offsets[("sg",)] = len(self.kf_ids) * KF_DIM
        self.frame_dim = len(self.kf_ids) * KF_DIM + SG_DIM

        self.point_index: dict[tuple[int, int], int] = {}
        for kf in window.keyframes:
            if kf.points is None:
                continue
            for local in np.nonzero(kf.points.active_mask)[0]:
                self.point_index[(kf.state.kf_id, int(local))] = len(self.point_index)
        self.n_points = len(self.point_index)

        free = np.ones(self.frame_dim, dtype=bool)
        for key in ((("kf", i)) for i in self.kf_ids):
            off = self.offsets[key]
            if not window.twists_active:
                free[off + TWIST.start:off + TWIST.stop] = False
            if not affine_enabled:
                free[off + AFFINE.start:off + AFFINE.stop] = False
        if window.config.freeze_scale_gravity:
            off = self.offsets[("sg",)]
            free[off:off + SG_DIM] = False
        self.free = free

    def kf_slice(self, kf_id: int) -> slice:
        off = self.offsets[("kf", kf_id)]
        return slice(off, off + KF_DIM)

    def sg_slice(self) -> slice:
        off = self.offsets[("sg",)]
        return slice(off, off + SG_DIM)

    def point_cols(self, kf_id: int, locals_: np.ndarray) -> np.ndarray:
        return np.array([self.point_index[(kf_id, int(i))] for i in locals_],
                        dtype=int)


def apply_step(window: Window, layout: Layout, dx_frame: np.ndarray,
               dx_points: np.ndarray, min_inv_depth: float = 1e-6):
    """Left-increment poses, additive everything else; returns nothing."""
    for kf in window.keyframes:
        s = layout.kf_slice(kf.state.kf_id)
        d = dx_frame[s]
        R, t = se3_exp(d[POSE])
        st = kf.state
        st.T_CfWf = Pose3(R, t) @ st.T_CfWf
        st.xi = st.xi + d[TWIST]
        st.v = st.v + d[VEL]
        st.b = st.b + d[BIAS]
        st.a_aff += d[AFFINE][0]
        st.b_aff += d[AFFINE][1]
    dsg = dx_frame[layout.sg_slice()]
    window.sg = window.sg.updated(dsg[0], dsg[1:4])
    for (kf_id, local), col in layout.point_index.items():
        block = window.kf_by_id(kf_id).points
        block.inv_depth[local] = max(block.inv_depth[local] + dx_points[col],
                                     min_inv_depth)


def snapshot(window: Window):
    """Deep copy of the mutable optimization state (for step rollback)."""
    states = [kf.state.copy() for kf in window.keyframes]
    sg = window.sg.copy()
    depths = {kf.state.kf_id: (kf.points.inv_depth.copy() if kf.points else None)
              for kf in window.keyframes}
    return states, sg, depths


def restore(window: Window, snap):
    states, sg, depths = snap
    for kf, st in zip(window.keyframes, states):
        kf.state = st
    window.sg = sg
    for kf in window.keyframes:
        d = depths[kf.state.kf_id]
        if d is not None:
            kf.points.inv_depth[:] = d
