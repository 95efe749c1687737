"""Pinhole camera with radial-tangential distortion and rolling-shutter timing.

The backend works in undistorted pixel coordinates. The distortion map
``distort`` sends undistorted pixels into the physical (distorted) image,
whose y coordinate is the sensor readout row; the capture time offset of a
pixel is that row minus the vertical middle ``y0``, measured in row units.
Multiplying by ``row_time_td`` converts rows to seconds. ``row_time_td = 0``
encodes a global shutter and makes the capture time identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import yaml

MIN_DEPTH = 1e-6


class CameraError(ValueError):
    pass


class DistortionDomainError(CameraError):
    """Point outside the radius range the distortion polynomial is valid for."""


class BehindCameraError(CameraError):
    pass


class InvalidDepthError(CameraError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 640
    height: int = 480
    row_time_td: float = 0.0
    readout_sign: float = 1.0
    # Undistorted pixels normalized beyond this radius are outside the
    # calibrated domain. Default covers the image corners with slack.
    max_norm_radius: float = 0.0
    # capture_time is reported in full-resolution row units even on
    # downscaled pyramid cameras (row_scale = 2**level).
    row_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if self.row_time_td < 0:
            raise CameraError("row_time_td must be >= 0")
        if self.readout_sign not in (-1.0, 1.0):
            raise CameraError("readout_sign must be +1 or -1")
        if self.max_norm_radius == 0.0:
            corners = np.array([
                [0.0, 0.0], [self.width - 1.0, 0.0],
                [0.0, self.height - 1.0], [self.width - 1.0, self.height - 1.0],
            ])
            xn = (corners[:, 0] - self.cx) / self.fx
            yn = (corners[:, 1] - self.cy) / self.fy
            r = float(np.sqrt(xn**2 + yn**2).max())
            object.__setattr__(self, "max_norm_radius", 1.5 * r)
        if not (0.0 < self.y0 < self.height):
            raise CameraError("y0 must lie strictly inside the image")

    @property
    def y0(self) -> float:
        """Vertical middle of the distorted image (readout time origin)."""
        return (self.height - 1.0) / 2.0

    # ------------------------------------------------------------------
    def normalized(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([(xy[..., 0] - self.cx) / self.fx,
                         (xy[..., 1] - self.cy) / self.fy], axis=-1)

    def _distort_normalized(self, n: np.ndarray) -> np.ndarray:
        x, y = n[..., 0], n[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def distort_batch(self, xy_undist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Undistorted pixels -> distorted pixels, plus in-domain mask."""
        n = self.normalized(xy_undist)
        valid = np.sqrt(n[..., 0] ** 2 + n[..., 1] ** 2) <= self.max_norm_radius
        d = self._distort_normalized(n)
        out = np.stack([d[..., 0] * self.fx + self.cx,
                        d[..., 1] * self.fy + self.cy], axis=-1)
        return out, valid

    def distort(self, xy_undist: np.ndarray) -> np.ndarray:
        out, valid = self.distort_batch(np.asarray(xy_undist, dtype=float))
        if not np.all(valid):
            raise DistortionDomainError("point outside calibrated distortion domain")
        return out

    def distort_jacobian(self, xy_undist: np.ndarray) -> np.ndarray:
        """d(distorted px)/d(undistorted px), shape (..., 2, 2)."""
        n = self.normalized(xy_undist)
        x, y = n[..., 0], n[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        dradial = self.k1 + 2.0 * self.k2 * r2  # d(radial)/d(r2)
        # normalized-domain Jacobian
        dxdx = radial + x * dradial * 2.0 * x + 2.0 * self.p1 * y + 6.0 * self.p2 * x
        dxdy = x * dradial * 2.0 * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        dydx = y * dradial * 2.0 * x + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        dydy = radial + y * dradial * 2.0 * y + 6.0 * self.p1 * y + 2.0 * self.p2 * x
        J = np.empty(n.shape[:-1] + (2, 2))
        # chain: px -> normalized (1/f) then normalized -> px (f)
        J[..., 0, 0] = dxdx
        J[..., 0, 1] = self.fx * dxdy / self.fy
        J[..., 1, 0] = self.fy * dydx / self.fx
        J[..., 1, 1] = dydy
        return J

    def undistort(self, xy_dist: np.ndarray, max_iter: int = 10,
                  tol: float = 1e-8) -> np.ndarray:
        """Invert ``distort`` by Newton iteration (no closed form exists)."""
        xy_dist = np.asarray(xy_dist, dtype=float)
        u = xy_dist.copy()
        for _ in range(max_iter):
            f, _ = self.distort_batch(u)
            err = f - xy_dist
            if np.abs(err).max() < tol:
                break
            J = self.distort_jacobian(u)
            step = np.linalg.solve(J, err[..., None])[..., 0]
            u = u - step
        return u

    # ------------------------------------------------------------------
    def capture_time_batch(self, xy_undist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Capture-time offset of undistorted pixels, in row units.

        Returns (t, valid). Zero everywhere for a global shutter.
        """
        xy_undist = np.asarray(xy_undist, dtype=float)
        if self.row_time_td == 0.0:
            return np.zeros(xy_undist.shape[:-1]), np.ones(xy_undist.shape[:-1], dtype=bool)
        d, valid = self.distort_batch(xy_undist)
        t = (d[..., 1] - self.y0) * self.readout_sign * self.row_scale
        return t, valid

    def capture_time(self, xy_undist: np.ndarray) -> float:
        t, valid = self.capture_time_batch(np.asarray(xy_undist, dtype=float))
        if not np.all(valid):
            raise DistortionDomainError("point outside calibrated distortion domain")
        return float(t) if t.ndim == 0 else t

    def capture_time_gradient(self, xy_undist: np.ndarray) -> np.ndarray:
        """d(capture time)/d(undistorted pixel), shape (..., 2)."""
        xy_undist = np.asarray(xy_undist, dtype=float)
        if self.row_time_td == 0.0:
            return np.zeros(xy_undist.shape[:-1] + (2,))
        J = self.distort_jacobian(xy_undist)
        return J[..., 1, :] * self.readout_sign * self.row_scale

    # ------------------------------------------------------------------
    def project_batch(self, p_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p_cam = np.asarray(p_cam, dtype=float)
        z = p_cam[..., 2]
        valid = z > MIN_DEPTH
        zs = np.where(valid, z, 1.0)
        return np.stack([self.fx * p_cam[..., 0] / zs + self.cx,
                         self.fy * p_cam[..., 1] / zs + self.cy], axis=-1), valid

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        uv, valid = self.project_batch(p_cam)
        if not np.all(valid):
            raise BehindCameraError("point at or behind the camera plane")
        return uv

    def project_jacobian(self, p_cam: np.ndarray) -> np.ndarray:
        """d(undistorted px)/d(p_cam), shape (..., 2, 3)."""
        p_cam = np.asarray(p_cam, dtype=float)
        x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
        J = np.zeros(p_cam.shape[:-1] + (2, 3))
        iz = 1.0 / z
        J[..., 0, 0] = self.fx * iz
        J[..., 0, 2] = -self.fx * x * iz * iz
        J[..., 1, 1] = self.fy * iz
        J[..., 1, 2] = -self.fy * y * iz * iz
        return J

    def unproject(self, xy: np.ndarray, inv_depth) -> np.ndarray:
        inv = np.asarray(inv_depth, dtype=float)
        if np.any(inv <= 0.0):
            raise InvalidDepthError("inverse depth must be positive")
        n = self.normalized(xy)
        dirs = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
        return dirs / inv[..., None]

    def ray_dirs(self, xy: np.ndarray) -> np.ndarray:
        """Unit-depth ray directions (x_n, y_n, 1) of undistorted pixels."""
        n = self.normalized(xy)
        return np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)

    # ------------------------------------------------------------------
    def scaled(self, level: int) -> "CameraModel":
        """Camera of pyramid level ``level`` (dimensions halved per level)."""
        if level == 0:
            return self
        f = float(2 ** level)
        return replace(
            self,
            fx=self.fx / f, fy=self.fy / f,
            cx=(self.cx + 0.5) / f - 0.5, cy=(self.cy + 0.5) / f - 0.5,
            width=self.width // (2 ** level), height=self.height // (2 ** level),
            row_scale=self.row_scale * f,
        )

    def validate_readout_monotonic(self, columns: int = 9, samples: int = 64) -> bool:
        """Numerically check capture time grows with undistorted y per column."""
        if self.row_time_td == 0.0:
            return True
        xs = np.linspace(0.05 * self.width, 0.95 * self.width, columns)
        ys = np.linspace(0.05 * self.height, 0.95 * self.height, samples)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        t, valid = self.capture_time_batch(np.stack([X, Y], axis=-1))
        if not np.all(valid):
            return False
        dt = np.diff(t, axis=1) * self.readout_sign
        return bool(np.all(dt > 0))


CALIB_KEYS = ["fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2",
              "width", "height", "row_time_td", "readout_sign"]


def load_camera_yaml(path) -> CameraModel:
    """Parse a camera calibration file; unknown keys are rejected."""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise CameraError(f"{path}: expected a key/value mapping")
    unknown = sorted(set(data) - set(CALIB_KEYS))
    if unknown:
        raise CameraError(f"{path}: unknown calibration keys {unknown}")
    missing = sorted(set(CALIB_KEYS) - set(data))
    if missing:
        raise CameraError(f"{path}: missing calibration keys {missing}")
    return CameraModel(
        fx=float(data["fx"]), fy=float(data["fy"]),
        cx=float(data["cx"]), cy=float(data["cy"]),
        k1=float(data["k1"]), k2=float(data["k2"]),
        p1=float(data["p1"]), p2=float(data["p2"]),
        width=int(data["width"]), height=int(data["height"]),
        row_time_td=float(data["row_time_td"]),
        readout_sign=float(data["readout_sign"]),
    )


def save_camera_yaml(path, cam: CameraModel) -> None:
    data = {k: getattr(cam, k) for k in CALIB_KEYS}
    data["width"] = int(cam.width)
    data["height"] = int(cam.height)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True)
