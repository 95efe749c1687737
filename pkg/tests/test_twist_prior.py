import numpy as np
import pytest

from rsvio.camera import CameraModel
from rsvio.lie import Pose3, ScaledRot, so3_exp
from rsvio.state import Calibration, KeyframeState, ScaleGravity
from rsvio.twist_prior import (
    TwistPriorTerm,
    camera_twist,
    imu_twist,
    prior_twist,
    twist_energy,
    twist_prior_for_keyframe,
    twist_residual,
    twist_residual_jacobians,
)

T_D = 29.47e-6


def make_calib(T_CmI=None, td=T_D):
    cam = CameraModel(fx=400, fy=400, cx=320, cy=240, width=640, height=480,
                      row_time_td=td)
    return Calibration(T_CmI=T_CmI or Pose3.identity(), camera=cam)


def make_kf(rng=None, t=0.0):
    if rng is None:
        return KeyframeState(timestamp=t, T_CfWf=Pose3.identity())
    kf = KeyframeState(timestamp=t, T_CfWf=Pose3(so3_exp(rng.standard_normal(3)),
                                                 rng.standard_normal(3)))
    kf.xi = rng.standard_normal(6) * 1e-4
    kf.v = rng.standard_normal(3)
    kf.b = rng.standard_normal(6) * 1e-2
    return kf


def test_imu_twist_zero_for_cancelled_inputs():
    kf = make_kf()
    kf.b = np.array([0, 0, 0, 0.01, -0.02, 0.03])
    xi = imu_twist(kf, ScaleGravity(), make_calib(), omega=kf.bias_gyro)
    assert np.abs(xi).max() == 0.0


def test_imu_twist_identity_rotations():
    kf = make_kf()
    kf.v = np.array([1.0, 0, 0])
    xi = imu_twist(kf, ScaleGravity(), make_calib(), omega=np.array([0, 0, 0.5]))
    assert np.allclose(xi, [1, 0, 0, 0, 0, 0.5], atol=1e-15)


def test_imu_twist_translational_part_matches_rotation_oracle():
    from rsvio.state import rotation_imu_from_world
    rng = np.random.default_rng(3)
    for _ in range(100):
        kf = make_kf(rng)
        sg = ScaleGravity(ScaledRot(rng.uniform(0.5, 2), so3_exp(rng.standard_normal(3))))
        calib = make_calib(Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3)))
        xi = imu_twist(kf, sg, calib, omega=np.zeros(3))
        oracle = rotation_imu_from_world(kf, sg, calib) @ kf.v
        assert np.abs(xi[:3] - oracle).max() < 1e-12


def test_camera_twist_identity_extrinsic():
    xi = np.array([0.1, -0.2, 0.3, 0.01, 0.02, -0.03])
    assert np.allclose(camera_twist(xi, make_calib()), -xi, atol=1e-15)


def test_camera_twist_pure_rotation_extrinsic():
    R = so3_exp(np.array([0.4, -0.1, 0.7]))
    calib = make_calib(Pose3(R, np.zeros(3)))
    xi = np.array([0.1, -0.2, 0.3, 0.01, 0.02, -0.03])
    out = camera_twist(xi, calib)
    assert np.allclose(out[:3], -(R @ xi[:3]), atol=1e-14)
    assert np.allclose(out[3:], -(R @ xi[3:]), atol=1e-14)


def test_twist_path_equivalence_identity():
    # acting with the IMU twist on the IMU pose equals acting with the
    # converted twist on the camera pose, as pose-valued functions of t
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        T_CmI = Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3))
        T_CmWm = Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3))
        calib = make_calib(T_CmI)
        xi_imu = rng.standard_normal(6)
        xi_cam = camera_twist(xi_imu, calib)
        T_WmI = T_CmWm.inverse() @ T_CmI
        for t in np.linspace(0.0, 0.1, 7):
            lhs = T_WmI @ Pose3.exp(xi_imu * t)
            rhs = (Pose3.exp(xi_cam * t) @ T_CmWm).inverse() @ T_CmI
            worst = max(worst, np.abs(lhs.matrix() - rhs.matrix()).max())
    assert worst < 1e-10


def test_prior_twist_identity_mapping():
    xi = np.array([0.1, -0.2, 0.3, 0.01, 0.02, -0.03])
    assert np.allclose(prior_twist(xi, 1.0, 1.0), xi, atol=1e-15)


def test_prior_twist_scale_and_row_time():
    xi = np.array([1.0, -2.0, 3.0, 0.1, 0.2, -0.3])
    out = prior_twist(xi, 2.0, T_D)
    assert np.allclose(out[:3], T_D * xi[:3] / 2.0, atol=1e-18)
    assert np.allclose(out[3:], T_D * xi[3:], atol=1e-18)


def test_prior_twist_rejects_bad_scale():
    with pytest.raises(ValueError):
        prior_twist(np.zeros(6), 0.0, T_D)


def test_gauge_consistency_of_scale_factor():
    # rescaling: s -> lam*s, non-metric translations and twists -> 1/lam,
    # metric v fixed: a zero twist deviation stays zero and the deviation
    # transforms exactly like a non-metric twist.
    rng = np.random.default_rng(7)
    for _ in range(50):
        kf = make_kf(rng)
        sg = ScaleGravity(ScaledRot(rng.uniform(0.5, 2), so3_exp(rng.standard_normal(3))))
        calib = make_calib(Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3)))
        omega = rng.standard_normal(3)
        kf.xi = twist_prior_for_keyframe(kf, sg, calib, omega)  # consistent state
        lam = rng.uniform(0.3, 3.0)
        kf2 = kf.copy()
        kf2.T_CfWf = Pose3(kf.T_CfWf.R, kf.T_CfWf.t / lam)
        kf2.xi = np.concatenate([kf.xi[:3] / lam, kf.xi[3:]])
        sg2 = ScaleGravity(ScaledRot(lam * sg.s, sg.R))
        r2 = twist_residual(kf2, sg2, calib, omega)
        assert np.abs(r2).max() < 1e-15

        kf.xi = rng.standard_normal(6) * 1e-4
        r = twist_residual(kf, sg, calib, omega)
        kf2.xi = np.concatenate([kf.xi[:3] / lam, kf.xi[3:]])
        r2 = twist_residual(kf2, sg2, calib, omega)
        assert np.abs(r2[:3] * lam - r[:3]).max() < 1e-14
        assert np.abs(r2[3:] - r[3:]).max() < 1e-14


def test_twist_energy_zero_when_consistent():
    rng = np.random.default_rng(9)
    calib = make_calib(Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3)))
    sg = ScaleGravity(ScaledRot(1.7, so3_exp(rng.standard_normal(3))))
    kfs = []
    omega = rng.standard_normal(3)
    for k in range(4):
        kf = make_kf(rng, t=0.1 * k)
        kf.xi = twist_prior_for_keyframe(kf, sg, calib, omega)
        kfs.append(kf)
    E, terms = twist_energy(kfs, sg, calib, lambda t: omega, np.full(6, 100.0))
    assert E < 1e-25
    assert len(terms) == 4


def test_twist_energy_quadratic_form():
    kf = make_kf()
    eps = 1e-3
    kf.xi = np.array([-eps, 0, 0, 0, 0, 0])  # prior twist is zero here
    E, _ = twist_energy([kf], ScaleGravity(), make_calib(),
                        lambda t: np.zeros(3), np.ones(6))
    assert E == pytest.approx(eps * eps, rel=1e-12)


def test_missing_gyro_coverage_raises():
    from rsvio.imu import ImuData
    stream = ImuData(np.array([0.0, 0.1]), np.zeros((2, 3)), np.zeros((2, 3)))
    kf = make_kf(t=0.5)
    with pytest.raises(ValueError, match="coverage"):
        twist_energy([kf], ScaleGravity(), make_calib(), stream.gyro_at, np.ones(6))


def test_twist_prior_term_validates_weights():
    with pytest.raises(ValueError):
        TwistPriorTerm(0, np.zeros(3), np.zeros(6), np.zeros(6))


def test_residual_jacobians_match_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    worst = 0.0
    for _ in range(50):
        kf = make_kf(rng)
        sg = ScaleGravity(ScaledRot(rng.uniform(0.5, 2), so3_exp(rng.standard_normal(3))))
        calib = make_calib(Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3)))
        omega = rng.standard_normal(3)
        J = twist_residual_jacobians(kf, sg, calib, omega)

        def fd(apply, dim):
            out = np.zeros((6, dim))
            for k in range(dim):
                e = np.zeros(dim)
                e[k] = h
                out[:, k] = (twist_residual(*apply(+e), omega)
                             - twist_residual(*apply(-e), omega)) / (2 * h)
            return out

        def vary_xi(e):
            k2 = kf.copy(); k2.xi = kf.xi + e; return k2, sg, calib

        def vary_v(e):
            k2 = kf.copy(); k2.v = kf.v + e; return k2, sg, calib

        def vary_b(e):
            k2 = kf.copy(); k2.b = kf.b + e; return k2, sg, calib

        def vary_pose(e):
            k2 = kf.copy(); k2.T_CfWf = Pose3.exp(e) @ kf.T_CfWf; return k2, sg, calib

        def vary_sg(e):
            return kf.copy(), sg.updated(e[0], e[1:4]), calib

        for name, J_fd in (("xi", fd(vary_xi, 6)), ("v", fd(vary_v, 3)),
                           ("b", fd(vary_b, 6)), ("pose", fd(vary_pose, 6)),
                           ("sg", fd(vary_sg, 4))):
            scale = max(1.0, np.abs(J_fd).max())
            err = np.abs(J[name] - J_fd).max() / scale
            worst = max(worst, err)
            assert err < 1e-5, f"{name}: rel err {err:.2e}"
    assert worst < 1e-5
