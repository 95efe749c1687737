"""Deterministic synthetic data: trajectories, rolling-shutter renders, IMU.

Trajectories are piecewise analytic (constant-twist or sinusoidal segments),
so poses, velocities and accelerations are exact at any query time. Images
are rendered by per-pixel ray casting against textured planes, with each
undistorted pixel evaluated at its own capture time, which reproduces the
row-sequential readout of a rolling shutter exactly (a zero row time yields
a global-shutter render). Zero-noise IMU streams therefore integrate back to
the trajectory, making the simulator usable as an oracle for the backend.

The simulator world is metric and gravity-aligned (g = (0, 0, -9.81)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .imu import ImuData, ImuNoise
from .lie import Pose3, se3_exp, so3_exp, so3_right_jacobian
from .state import GRAVITY_WM

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# textures


class NoiseTexture:
    """Band-limited value noise: a seeded sum of random sinusoids."""

    def __init__(self, seed: int, components: int = 24,
                 min_freq: float = 0.3, max_freq: float = 3.0):
        rng = np.random.default_rng(seed)
        angles = rng.uniform(0, 2 * np.pi, components)
        freqs = rng.uniform(min_freq, max_freq, components)
        self.fu = freqs * np.cos(angles)
        self.fv = freqs * np.sin(angles)
        self.phase = rng.uniform(0, 2 * np.pi, components)
        amp = 1.0 / (1.0 + freqs)
        self.amp = 0.38 * amp / np.abs(amp).sum()

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        arg = (np.multiply.outer(u, self.fu) + np.multiply.outer(v, self.fv)
               + self.phase)
        return 0.5 + np.sin(2 * np.pi * arg) @ self.amp


class EdgeTexture:
    """Steep smooth step along u (for readout-slant measurements)."""

    def __init__(self, u0: float = 0.0, width: float = 0.02):
        self.u0 = u0
        self.width = width

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        z = (np.asarray(u, dtype=float) - self.u0) / self.width
        return 0.2 + 0.6 / (1.0 + np.exp(-np.clip(z, -60, 60)))


@dataclass(frozen=True)
class Plane:
    """Textured rectangle: local z = 0 plane, extent in x/y."""

    T_WP: Pose3
    half_extent: tuple[float, float]
    texture: object


@dataclass
class SceneSpec:
    planes: list[Plane]
    ambient: float = 0.08
    min_coverage: float = 0.5   # fraction of pixels that must hit geometry


def room_scene(seed: int = 0, size=(8.0, 8.0, 3.0), texture_scale: float = 1.0) -> SceneSpec:
    """Box interior: four walls, floor and ceiling, independently textured."""
    sx, sy, sz = size
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    planes = []

    def wall(idx, R, t, extent):
        planes.append(Plane(Pose3(np.asarray(R, dtype=float), np.asarray(t, dtype=float)),
                            extent, NoiseTexture(seed * 101 + idx,
                                                 max_freq=3.0 / texture_scale)))

    rx90 = so3_exp(np.array([np.pi / 2, 0, 0]))
    ry90 = so3_exp(np.array([0, np.pi / 2, 0]))
    # walls at +-y and +-x (normals point inside)
    wall(1, rx90, [0, hy, 0], (hx, hz))
    wall(2, rx90, [0, -hy, 0], (hx, hz))
    wall(3, ry90, [hx, 0, 0], (hz, hy))
    wall(4, ry90, [-hx, 0, 0], (hz, hy))
    # floor and ceiling
    wall(5, np.eye(3), [0, 0, -hz], (hx, hy))
    wall(6, np.eye(3), [0, 0, hz], (hx, hy))
    return SceneSpec(planes=planes)


def edge_scene(distance: float = 2.0, extent: float = 6.0) -> SceneSpec:
    """Single fronto-parallel plane with a vertical edge at its middle."""
    plane = Plane(Pose3(np.eye(3), np.array([0.0, 0.0, distance])),
                  (extent, extent), EdgeTexture())
    return SceneSpec(planes=[plane], min_coverage=0.9)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class ConstantTwistSegment:
    """T_CW(tau) = exp(xi * tau) T_CW(0); xi is the world-to-camera twist/s."""

    duration: float
    xi: np.ndarray

    def eval(self, T_WC0: Pose3, tau: np.ndarray) -> dict:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        xi = np.asarray(self.xi, dtype=float)
        T_CW0 = T_WC0.inverse()
        E_R, E_t = se3_exp(xi[None, :] * tau[:, None])
        R_CW = E_R @ T_CW0.R
        t_CW = (E_R @ T_CW0.t) + E_t
        R_WC = np.swapaxes(R_CW, -1, -2)
        p_WC = -(R_WC @ t_CW[..., None])[..., 0]
        v_c, w_c = xi[:3], xi[3:]
        vel = -(R_WC @ v_c)
        acc = R_WC @ np.cross(w_c, v_c)
        omega = np.broadcast_to(-w_c, tau.shape + (3,)).copy()
        return dict(R_WC=R_WC, p_WC=p_WC, vel_w=vel, acc_w=acc, omega_body=omega)


@dataclass(frozen=True)
class SinusoidSegment:
    """Per-axis sinusoids in world translation and body rotation.

    phase="cos":     p(tau) = p0 + A (1 - cos(2 pi f tau)); starts at rest
                     but with maximum acceleration (C1 at the joint).
    phase="cycloid": p(tau) = p0 + A (th - sin th), th = 2 pi f tau; starts
                     with zero velocity AND zero acceleration (C2 start),
                     oscillating around a steady drift.
    """

    duration: float
    trans_amp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_freq: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_amp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_freq: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase: str = "cos"

    def _axis(self, amp, omega, t):
        th = t * omega
        if self.phase == "cycloid":
            pos = amp * (th - np.sin(th))
            vel = amp * omega * (1.0 - np.cos(th))
            acc = amp * omega * omega * np.sin(th)
        else:
            pos = amp * (1.0 - np.cos(th))
            vel = amp * omega * np.sin(th)
            acc = amp * omega * omega * np.cos(th)
        return pos, vel, acc

    def eval(self, T_WC0: Pose3, tau: np.ndarray) -> dict:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        A = np.asarray(self.trans_amp, dtype=float)
        f = 2 * np.pi * np.asarray(self.trans_freq, dtype=float)
        B = np.asarray(self.rot_amp, dtype=float)
        g = 2 * np.pi * np.asarray(self.rot_freq, dtype=float)
        p_off, vel, acc = self._axis(A, f, tau[:, None])
        theta, theta_dot, _ = self._axis(B, g, tau[:, None])
        p = T_WC0.t + p_off
        R_WC = T_WC0.R @ so3_exp(theta)
        omega = (so3_right_jacobian(theta) @ theta_dot[..., None])[..., 0]
        return dict(R_WC=R_WC, p_WC=p, vel_w=vel, acc_w=acc, omega_body=omega)


class TrajectoryError(ValueError):
    pass


class Trajectory:
    """Piecewise analytic camera trajectory T_WC(t), t in [0, duration]."""

    def __init__(self, segments, start: Pose3 | None = None):
        if not segments:
            raise TrajectoryError("trajectory needs at least one segment")
        self.segments = list(segments)
        self.start_poses = [start or Pose3.identity()]
        self.offsets = [0.0]
        for seg in self.segments:
            if seg.duration <= 0:
                raise TrajectoryError("segment durations must be positive")
            end = seg.eval(self.start_poses[-1], np.array([seg.duration]))
            self.start_poses.append(Pose3(end["R_WC"][0], end["p_WC"][0]))
            self.offsets.append(self.offsets[-1] + seg.duration)
        self.duration = self.offsets[-1]

    def _locate(self, t: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.offsets, t, side="right") - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def state(self, t) -> dict:
        """Batched kinematic state at absolute times t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < -1e-9) or np.any(t > self.duration + 1e-9):
            raise TrajectoryError(
                f"time outside trajectory domain [0, {self.duration}]")
        idx = self._locate(t)
        out = {k: np.zeros(t.shape + s) for k, s in
               (("R_WC", (3, 3)), ("p_WC", (3,)), ("vel_w", (3,)),
                ("acc_w", (3,)), ("omega_body", (3,)))}
        for seg_i in np.unique(idx):
            sel = idx == seg_i
            seg = self.segments[seg_i]
            tau = np.clip(t[sel] - self.offsets[seg_i], 0.0, seg.duration)
            vals = seg.eval(self.start_poses[seg_i], tau)
            for k in out:
                out[k][sel] = vals[k]
        return out

    def pose_wc(self, t: float) -> Pose3:
        s = self.state(np.array([t]))
        return Pose3(s["R_WC"][0], s["p_WC"][0])

    def pose_cw(self, t: float) -> Pose3:
        return self.pose_wc(t).inverse()

    def left_twist_cw(self, t: float) -> np.ndarray:
        """World-to-camera twist xi/s with d/dt T_CW = hat(xi) T_CW."""
        s = self.state(np.array([t]))
        R_CW = s["R_WC"][0].T
        return -np.concatenate([R_CW @ s["vel_w"][0], s["omega_body"][0]])

    def check_c1(self, tol: float = 1e-9) -> None:
        """Velocity/rate continuity at segment joints (IMU validity)."""
        for k in range(len(self.segments) - 1):
            t = self.offsets[k + 1]
            a = self.segments[k].eval(self.start_poses[k],
                                      np.array([self.segments[k].duration]))
            b = self.segments[k + 1].eval(self.start_poses[k + 1], np.array([0.0]))
            dv = np.abs(a["vel_w"][0] - b["vel_w"][0]).max()
            dw = np.abs(a["omega_body"][0] - b["omega_body"][0]).max()
            if dv > tol or dw > tol:
                raise TrajectoryError(
                    f"segment joint at t={t} is not C1 (dv={dv:.2e}, dw={dw:.2e})")


# ---------------------------------------------------------------------------
# rendering


class CoverageError(RuntimeError):
    pass


def render_rs_image(scene: SceneSpec, trajectory: Trajectory, cam: CameraModel,
                    frame_time: float):
    """Render one frame; returns (image [0,1], inverse depth, hit fraction).

    Every undistorted pixel is evaluated at its own capture time
    ``frame_time + t_rows * row_time_td``; with row_time_td = 0 all pixels
    share frame_time (global shutter).
    """
    H, W = cam.height, cam.width
    xs, ys = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    pix = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    t_rows, valid = cam.capture_time_batch(pix)
    if not np.all(valid):
        raise CoverageError("camera model invalid over its own image domain")
    t_sec = frame_time + t_rows * cam.row_time_td

    state = trajectory.state(t_sec)
    R_WC, p_WC = state["R_WC"], state["p_WC"]
    dirs_c = cam.ray_dirs(pix)
    dirs_w = (R_WC @ dirs_c[..., None])[..., 0]

    n = pix.shape[0]
    best_depth = np.full(n, np.inf)
    intensity = np.full(n, scene.ambient)
    for plane in scene.planes:
        T_PW_R = plane.T_WP.R.T
        o_p = (T_PW_R @ (p_WC - plane.T_WP.t)[..., None])[..., 0]
        d_p = (T_PW_R @ dirs_w[..., None])[..., 0]
        dz = d_p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(np.abs(dz) > 1e-12, -o_p[:, 2] / dz, np.inf)
        u = o_p[:, 0] + lam * d_p[:, 0]
        v = o_p[:, 1] + lam * d_p[:, 1]
        hit = ((lam > 1e-6) & np.isfinite(lam)
               & (np.abs(u) <= plane.half_extent[0])
               & (np.abs(v) <= plane.half_extent[1])
               & (lam < best_depth))
        if np.any(hit):
            vals = plane.texture.sample(u[hit], v[hit])
            intensity[hit] = vals
            best_depth[hit] = lam[hit]

    hit_fraction = float(np.isfinite(best_depth).mean())
    if hit_fraction < scene.min_coverage:
        raise CoverageError(
            f"frame at t={frame_time:.3f}s covers only {hit_fraction:.2%} of pixels")
    inv_depth = np.where(np.isfinite(best_depth), 1.0 / best_depth, 0.0)
    return (np.clip(intensity, 0.0, 1.0).reshape(H, W),
            inv_depth.reshape(H, W), hit_fraction)


# ---------------------------------------------------------------------------
# IMU synthesis


def synthesize_imu(trajectory: Trajectory, rate_hz: float,
                   noise: ImuNoise | None = None,
                   bias: np.ndarray | None = None,
                   g: np.ndarray | None = None,
                   R_CI: np.ndarray | None = None,
                   seed: int = 0,
                   t0: float = 0.0, t1: float | None = None) -> ImuData:
    """Sample gyro/accel along the trajectory at rate_hz.

    The IMU shares the camera origin (rotation-only extrinsic R_CI,
    IMU -> camera); lever arms would need angular-acceleration terms that
    the analytic segments do not expose.
    """
    trajectory.check_c1()
    g = GRAVITY_WM if g is None else np.asarray(g, dtype=float)
    R_CI = np.eye(3) if R_CI is None else np.asarray(R_CI, dtype=float)
    t1 = trajectory.duration if t1 is None else t1
    n = int(round((t1 - t0) * rate_hz)) + 1
    t = t0 + np.arange(n) / rate_hz
    t = t[t <= t1 + 1e-12]

    s = trajectory.state(t)
    R_WI = s["R_WC"] @ R_CI
    omega = (R_CI.T @ s["omega_body"][..., None])[..., 0]
    f = (np.swapaxes(R_WI, -1, -2) @ (s["acc_w"] - g)[..., None])[..., 0]

    if bias is not None:
        b = np.asarray(bias, dtype=float).reshape(6)
        f = f + b[:3]
        omega = omega + b[3:]
    if noise is not None:
        rng = np.random.default_rng(seed)
        sd = np.sqrt(rate_hz)
        omega = omega + rng.standard_normal(omega.shape) * noise.sigma_gyro * sd
        f = f + rng.standard_normal(f.shape) * noise.sigma_accel * sd
    return ImuData(t, omega, f)


def gt_imu_pose(trajectory: Trajectory, T_CmI: Pose3, t: float) -> Pose3:
    """Ground-truth IMU-to-world pose at time t."""
    return trajectory.pose_wc(t) @ T_CmI


def export_dataset(out_dir, scene: SceneSpec, trajectory: Trajectory,
                   cams: dict[str, CameraModel], T_CmI: Pose3 | None = None,
                   fps: float = 20.0, imu_rate: float = 200.0,
                   noise: ImuNoise | None = None,
                   bias: np.ndarray | None = None,
                   seed: int = 0, start: float | None = None,
                   stop: float | None = None):
    """Render and write a loadable dataset directory.

    Streams share trigger timestamps (frame time = mid-row capture instant);
    a global-shutter twin stream is simply a camera with row_time_td = 0. The
    ground-truth file holds IMU poses in the (metric) simulator world.
    """
    import os

    from .dataset_io import (write_image_png16, write_imu_csv, write_imu_yaml,
                             write_manifest, write_trajectory)
    from .camera import save_camera_yaml

    T_CmI = T_CmI or Pose3.identity()
    if np.linalg.norm(T_CmI.t) > 1e-12:
        raise ValueError("simulated rigs support rotation-only camera-IMU "
                         "extrinsics")
    os.makedirs(os.path.join(out_dir, "calibration"), exist_ok=True)

    half_readout = max(cam.height / 2.0 * cam.row_time_td
                       for cam in cams.values())
    t0 = half_readout + 1e-6 if start is None else start
    t1 = (trajectory.duration - half_readout - 1e-6) if stop is None else stop
    n_frames = int(np.floor((t1 - t0) * fps)) + 1
    frame_times = t0 + np.arange(n_frames) / fps

    manifest_rows = []
    for stream, cam in cams.items():
        img_dir = os.path.join(out_dir, "images", stream)
        os.makedirs(img_dir, exist_ok=True)
        save_camera_yaml(os.path.join(out_dir, "calibration",
                                      f"camera_{stream}.yaml"), cam)
        shutter = "RS" if cam.row_time_td > 0 else "GS"
        for t in frame_times:
            img, _, _ = render_rs_image(scene, trajectory, cam, t)
            ns = int(round(t * 1e9))
            rel = os.path.join("images", stream, f"{ns}.png")
            write_image_png16(os.path.join(out_dir, rel), img)
            manifest_rows.append((ns, stream, shutter, rel))
    manifest_rows.sort(key=lambda r: (r[0], r[1]))
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest_rows)

    imu = synthesize_imu(trajectory, imu_rate, noise=noise, bias=bias,
                         R_CI=T_CmI.R, seed=seed)
    write_imu_csv(os.path.join(out_dir, "imu.csv"), imu)
    write_imu_yaml(os.path.join(out_dir, "calibration", "imu.yaml"),
                   {stream: T_CmI for stream in cams}, GRAVITY_WM,
                   noise or ImuNoise())

    gt_poses = [gt_imu_pose(trajectory, T_CmI, t) for t in frame_times]
    write_trajectory(os.path.join(out_dir, "groundtruth.txt"),
                     frame_times, gt_poses)
    return frame_times


def gt_row_twist(trajectory: Trajectory, cam: CameraModel, t: float) -> np.ndarray:
    """Ground-truth per-row world-to-camera twist at time t."""
    return trajectory.left_twist_cw(t) * cam.row_time_td
