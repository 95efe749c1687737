"""Lie-group arithmetic for SO(3), SE(3) and the scale-plus-rotation group.

Conventions used throughout the package:

* twists are 6-vectors with components 0-2 translational and 3-5 rotational,
* ``exp`` of a twist means hat + matrix exponential (closed form),
* poses act on points as ``p_B = T_BA p_A``.

All functions broadcast over leading batch dimensions; rotation matrices are
``(..., 3, 3)`` arrays, vectors ``(..., 3)`` or ``(..., 6)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle (rad) the trigonometric coefficients switch to Taylor
# expansions to avoid cancellation.
SMALL_ANGLE = 1e-8


def so3_hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (batched)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def so3_vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _trig_coeffs(theta: np.ndarray):
    """(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with Taylor branches."""
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (safe - np.sin(safe)) / (safe * safe * safe))
    return a, b, c


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula, exp: so(3) -> SO(3) (batched)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _trig_coeffs(theta)
    K = so3_hat(phi)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def so3_log(R: np.ndarray) -> np.ndarray:
    """Log map SO(3) -> so(3); rotation-vector norm is in [0, pi].

    At angles within 1e-6 of pi the axis is recovered from the largest
    diagonal element (deterministic branch).
    """
    R = np.asarray(R, dtype=float)
    batched = R.ndim > 2
    Rb = R.reshape((-1, 3, 3))
    trace = np.clip((Rb[:, 0, 0] + Rb[:, 1, 1] + Rb[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(trace)
    w = np.stack([Rb[:, 2, 1] - Rb[:, 1, 2],
                  Rb[:, 0, 2] - Rb[:, 2, 0],
                  Rb[:, 1, 0] - Rb[:, 0, 1]], axis=-1)
    out = np.empty_like(w)

    near_pi = (np.pi - theta) < 1e-6
    regular = ~near_pi
    small = theta < SMALL_ANGLE
    # small and moderate angles share the scaled-skew formula
    t = theta[regular]
    t_safe = np.where(t < SMALL_ANGLE, 1.0, t)
    scale = np.where(t < SMALL_ANGLE, 0.5 + t * t / 12.0, t / (2.0 * np.sin(t_safe)))
    out[regular] = w[regular] * scale[:, None]
    _ = small

    if np.any(near_pi):
        for i in np.nonzero(near_pi)[0]:
            Ri = Rb[i]
            ti = theta[i]
            diag = np.diagonal(Ri)
            k = int(np.argmax(diag))
            axis = np.zeros(3)
            axis[k] = np.sqrt(max(0.0, (diag[k] + 1.0) * 0.5))
            denom = 2.0 * axis[k]
            idx = [j for j in range(3) if j != k]
            for j in idx:
                axis[j] = (Ri[k, j] + Ri[j, k]) / (2.0 * denom)
            axis /= np.linalg.norm(axis)
            # fix sign so that exp(theta*axis) matches R (w ~ 2 sin(theta) axis)
            if ti < np.pi - 1e-12 and np.dot(axis, w[i]) < 0.0:
                axis = -axis
            out[i] = axis * ti
    return out.reshape(R.shape[:-2] + (3,)) if batched else out[0]


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): exp(phi + d) ~ exp(J_l(phi) d) exp(phi)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _trig_coeffs(theta)
    K = so3_hat(phi)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * K2


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # 1/t^2 - (1 + cos t) / (2 t sin t), Taylor: 1/12 + t^2/720 + ...
    coef = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = so3_hat(phi)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + coef[..., None, None] * K2


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian: exp(phi + d) ~ exp(phi) exp(J_r(phi) d)."""
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def se3_hat(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = so3_hat(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def se3_vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :3, 3], so3_vee(m[..., :3, :3])], axis=-1)


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp: se(3) -> SE(3), returned as (R, t) (batched)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    R = so3_exp(phi)
    V = so3_left_jacobian(phi)  # the SE(3) V-matrix equals the SO(3) left Jacobian
    t = (V @ rho[..., None])[..., 0]
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log(R)
    Vinv = so3_left_jacobian_inv(phi)
    rho = (Vinv @ np.asarray(t, dtype=float)[..., None])[..., 0]
    return np.concatenate([rho, phi], axis=-1)


def se3_adjoint(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """6x6 adjoint of (R, t): satisfies T exp(d) = exp(Adj(T) d) T."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., :3, 3:] = so3_hat(t) @ R
    out[..., 3:, 3:] = R
    return out


def se3_ad(xi: np.ndarray) -> np.ndarray:
    """Little adjoint ad(xi) with d/dt Adj(exp(xi t)) = ad(xi) Adj(exp(xi t))."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    P = so3_hat(xi[..., 3:])
    out[..., :3, :3] = P
    out[..., :3, 3:] = so3_hat(xi[..., :3])
    out[..., 3:, 3:] = P
    return out


def _barfoot_Q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    s, c = np.sin(safe), np.cos(safe)
    # (t - sin t)/t^3
    m1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - s) / safe**3)
    # (1 - t^2/2 - cos t)/t^4
    m2 = np.where(small, 1.0 / 24.0 - t2 / 720.0,
                  (1.0 - 0.5 * t2 - c) / safe**4)
    # (t - sin t - t^3/6)/t^5
    m3_series = -1.0 / 120.0 + t2 / 5040.0
    m3 = np.where(small, m3_series, (safe - s - safe**3 / 6.0) / safe**5)
    half = np.asarray(0.5)

    P = so3_hat(phi)
    Rr = so3_hat(rho)
    PR = P @ Rr
    RP = Rr @ P
    PRP = PR @ P
    P2R = P @ PR
    RP2 = RP @ P
    PRP2 = PR @ (P @ P)
    P2RP = P @ PRP

    c1 = m1[..., None, None]
    c2 = m2[..., None, None]
    c3 = (m2 - 3.0 * m3)[..., None, None]
    return (half * Rr
            + c1 * (PR + RP + PRP)
            - c2 * (P2R + RP2 - 3.0 * PRP)
            - 0.5 * c3 * (PRP2 + P2RP))


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 left Jacobian of SE(3): exp(x + d) ~ exp(J_l(x) d) exp(x)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    Jl = so3_left_jacobian(phi)
    Q = _barfoot_Q(rho, phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jl
    out[..., :3, 3:] = Q
    out[..., 3:, 3:] = Jl
    return out


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (x, y, z, w), Hamilton convention."""
    R = np.asarray(R, dtype=float)
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m21 - m12) / s
        y = (m02 - m20) / s
        z = (m10 - m01) / s
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        w = (m21 - m12) / s
        x = 0.25 * s
        y = (m01 + m10) / s
        z = (m02 + m20) / s
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        w = (m02 - m20) / s
        x = (m01 + m10) / s
        y = 0.25 * s
        z = (m12 + m21) / s
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        w = (m10 - m01) / s
        x = (m02 + m20) / s
        y = (m12 + m21) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float)
    n = x * x + y * y + z * z + w * w
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    s = 2.0 / n
    xx, yy, zz = x * x * s, y * y * s, z * z * s
    xy, xz, yz = x * y * s, x * z * s, y * z * s
    wx, wy, wz = w * x * s, w * y * s, w * z * s
    return np.array([
        [1.0 - yy - zz, xy - wz, xz + wy],
        [xy + wz, 1.0 - xx - zz, yz - wx],
        [xz - wy, yz + wx, 1.0 - xx - yy],
    ])


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass(frozen=True)
class Pose3:
    """Rigid transform T = (R, t); composition via ``@``, points via ``act``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose3":
        R, t = se3_exp(np.asarray(xi, dtype=float))
        return Pose3(R, t)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose3":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4) or np.abs(m[3] - np.array([0, 0, 0, 1.0])).max() > 1e-9:
            raise ValueError("expected homogeneous 4x4 matrix")
        return Pose3(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return Pose3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        return Pose3(Rt, -Rt @ self.t)

    def act(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (self.R @ p[..., None])[..., 0] + self.t

    def log(self) -> np.ndarray:
        return se3_log(self.R, self.t)

    def adjoint(self) -> np.ndarray:
        return se3_adjoint(self.R, self.t)


def exp_se3(xi: np.ndarray, t: float = 1.0) -> Pose3:
    """Constant-twist interpolation exp(hat(xi) * t) as a pose."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)) or not np.isfinite(t):
        raise ValueError("twist and time must be finite")
    return Pose3.exp(xi * t)


def log_se3(T: Pose3) -> np.ndarray:
    return T.log()


def adjoint(T: Pose3) -> np.ndarray:
    return T.adjoint()


@dataclass(frozen=True)
class ScaledRot:
    """Element of R+ x SO(3): acts on points as p -> s * R * p."""

    s: float
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        if not self.s > 0.0:
            raise ValueError("scale must be positive")

    @staticmethod
    def identity() -> "ScaledRot":
        return ScaledRot(1.0, np.eye(3))

    def act(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.s * (self.R @ p[..., None])[..., 0]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        return m

    def inverse(self) -> "ScaledRot":
        return ScaledRot(1.0 / self.s, self.R.T)


def apply_scaled_rot(S: ScaledRot, p: np.ndarray) -> np.ndarray:
    return S.act(p)
