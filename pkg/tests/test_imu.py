import numpy as np
import pytest

from rsvio.camera import CameraModel
from rsvio.imu import (
    BiasDeviationError,
    ImuData,
    ImuNoise,
    Preintegrated,
    PreintSettings,
    correct_bias,
    imu_residual_jacobians,
    imu_residuals,
    information_matrix,
    integrate,
    integrate_stream,
    needs_reintegration,
    predict_state,
)
from rsvio.lie import Pose3, ScaledRot, so3_exp
from rsvio.state import Calibration, KeyframeState, ScaleGravity, metric_state

G = np.array([0.0, 0.0, -9.81])


def default_calib(rng=None):
    cam = CameraModel(fx=400, fy=400, cx=320, cy=240, width=640, height=480,
                      row_time_td=29.47e-6)
    if rng is None:
        T = Pose3.identity()
    else:
        T = Pose3(so3_exp(rng.standard_normal(3) * 0.5), rng.standard_normal(3) * 0.1)
    return Calibration(T_CmI=T, camera=cam)


def test_bias_cancelled_samples_leave_deltas_identity():
    bias = np.array([0.1, -0.2, 0.3, 0.01, -0.02, 0.03])
    p = Preintegrated(bias_lin=bias)
    for _ in range(20):
        p = integrate(p, bias[3:], bias[:3], 0.01)
    assert np.abs(p.dR - np.eye(3)).max() < 1e-15
    assert np.abs(p.dv).max() < 1e-15
    assert np.abs(p.dp).max() < 1e-15
    assert p.dt_total == pytest.approx(0.2)


def test_constant_acceleration_matches_scalar_recursion_oracle():
    # independent scalar replay of the update recursion
    dv_oracle, dp_oracle = 0.0, 0.0
    for _ in range(10):
        dp_oracle += dv_oracle * 0.01 + 0.5 * 1.0 * 0.01**2
        dv_oracle += 1.0 * 0.01
    p = Preintegrated()
    for _ in range(10):
        p = integrate(p, np.zeros(3), np.array([1.0, 0, 0]), 0.01)
    assert p.dv[0] == pytest.approx(0.1, abs=1e-15)
    assert p.dv[0] == pytest.approx(dv_oracle, abs=1e-15)
    assert p.dp[0] == pytest.approx(dp_oracle, abs=1e-15)
    assert dp_oracle == pytest.approx(0.005)
    assert np.abs(p.dv[1:]).max() == 0.0 and np.abs(p.dp[1:]).max() == 0.0


def test_simplified_position_update_flag():
    settings = PreintSettings(include_accel_in_position=False)
    p = Preintegrated(settings=settings)
    for _ in range(10):
        p = integrate(p, np.zeros(3), np.array([1.0, 0, 0]), 0.01)
    assert p.dp[0] == pytest.approx(0.0045, abs=1e-15)


def test_non_accumulating_rotation_flag():
    settings = PreintSettings(accumulate_rotation=False)
    p = Preintegrated(settings=settings)
    for _ in range(100):
        p = integrate(p, np.array([0, 0, 1.0]), np.zeros(3), 0.01)
    # only the last step survives
    assert np.abs(p.dR - so3_exp(np.array([0, 0, 0.01]))).max() < 1e-15


def test_constant_rotation_rate_closed_form():
    p = Preintegrated()
    for _ in range(100):
        p = integrate(p, np.array([0, 0, 1.0]), np.zeros(3), 0.01)
    assert np.abs(p.dR - so3_exp(np.array([0, 0, 1.0]))).max() < 1e-9


def test_integrate_rejects_bad_steps():
    p = Preintegrated()
    with pytest.raises(ValueError):
        integrate(p, np.zeros(3), np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        integrate(p, np.array([np.nan, 0, 0]), np.zeros(3), 0.01)


def synth_segment(rate=1000.0, duration=0.25, seed=0, amp_w=0.8, amp_a=2.0):
    """Smooth synthetic gyro/accel signals (not tied to any trajectory)."""
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration + 0.5 / rate, 1.0 / rate)
    w = np.stack([amp_w * np.sin(2 * np.pi * f * t + ph)
                  for f, ph in zip(rng.uniform(0.5, 2.0, 3), rng.uniform(0, 6, 3))], axis=-1)
    a = np.stack([amp_a * np.cos(2 * np.pi * f * t + ph)
                  for f, ph in zip(rng.uniform(0.5, 2.0, 3), rng.uniform(0, 6, 3))], axis=-1)
    a = a + np.array([0.0, 0.0, 9.81])
    return ImuData(t, w, a)


def test_correct_bias_at_linearization_point_is_identity():
    seg = synth_segment()
    bias = np.array([0.05, 0.0, -0.02, 0.004, -0.001, 0.002])
    p = integrate_stream(seg, bias)
    dR, dv, dp = correct_bias(p, bias)
    assert np.abs(dR - p.dR).max() == 0.0
    assert np.abs(dv - p.dv).max() == 0.0
    assert np.abs(dp - p.dp).max() == 0.0


def test_correct_bias_matches_reintegration_to_first_order():
    seg = synth_segment()
    b0 = np.zeros(6)
    p = integrate_stream(seg, b0)

    db_g = np.array([0, 0, 0, 1e-3, -0.5e-3, 0.7e-3])
    dR_c, _, _ = correct_bias(p, b0 + db_g)
    p_re = integrate_stream(seg, b0 + db_g)
    assert np.abs(dR_c - p_re.dR).max() < 1e-5

    db_a = np.array([1e-2, -0.5e-2, 0.7e-2, 0, 0, 0])
    _, dv_c, dp_c = correct_bias(p, b0 + db_a)
    p_re = integrate_stream(seg, b0 + db_a)
    assert np.abs(dv_c - p_re.dv).max() < 1e-5
    assert np.abs(dp_c - p_re.dp).max() < 1e-5


def test_bias_correction_error_shrinks_quadratically():
    seg = synth_segment(seed=2)
    b0 = np.zeros(6)
    p = integrate_stream(seg, b0)
    rng = np.random.default_rng(3)
    direction = rng.standard_normal(6)
    direction /= np.linalg.norm(direction)
    errs = []
    for mag in (1e-2, 1e-3, 1e-4):
        b = b0 + mag * direction
        dR_c, dv_c, dp_c = correct_bias(p, b, check=False)
        p_re = integrate_stream(seg, b)
        err = max(np.abs(dR_c - p_re.dR).max(),
                  np.abs(dv_c - p_re.dv).max(),
                  np.abs(dp_c - p_re.dp).max())
        errs.append(err)
    assert errs[0] / errs[1] > 30.0
    assert errs[1] / errs[2] > 30.0


def test_bias_deviation_raises_and_flag():
    seg = synth_segment()
    p = integrate_stream(seg, np.zeros(6))
    bad = np.array([0, 0, 0, 0.05, 0, 0])
    assert needs_reintegration(p, bad)
    with pytest.raises(BiasDeviationError):
        correct_bias(p, bad)


def test_predict_state_trivial():
    from rsvio.state import MetricState
    s = MetricState(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(6), 0.0)
    p = Preintegrated()
    R, pos, v = predict_state(s, p, G, 0.0, 0.0)
    assert np.abs(R - np.eye(3)).max() == 0.0
    assert np.abs(pos).max() == 0.0 and np.abs(v).max() == 0.0


def test_predict_state_stationary_imu():
    from rsvio.state import MetricState
    rng = np.random.default_rng(5)
    R = so3_exp(rng.standard_normal(3))
    duration, rate = 0.25, 1000.0
    t = np.arange(0.0, duration + 0.5 / rate, 1.0 / rate)
    f = -R.T @ G  # accelerometer of a stationary body
    seg = ImuData(t, np.zeros((len(t), 3)), np.tile(f, (len(t), 1)))
    p = integrate_stream(seg, np.zeros(6))
    s = MetricState(R, np.array([1.0, 2, 3]), np.zeros(3), np.zeros(6), 0.0)
    R_hat, p_hat, v_hat = predict_state(s, p, G, 0.0, duration)
    assert np.abs(v_hat).max() < 1e-9
    assert np.abs(p_hat - s.p).max() < 1e-9
    assert np.abs(R_hat - R).max() < 1e-12


def test_predict_state_circular_trajectory():
    # non-rotating body moving on a circle; closed-form ground truth
    from rsvio.state import MetricState
    r, omega = 1.0, 0.5
    rate, duration = 1000.0, 0.25
    t = np.arange(0.0, duration + 0.5 / rate, 1.0 / rate)
    accel_world = np.stack([-r * omega**2 * np.cos(omega * t),
                            -r * omega**2 * np.sin(omega * t),
                            np.zeros_like(t)], axis=-1)
    seg = ImuData(t, np.zeros((len(t), 3)), accel_world - G)
    p = integrate_stream(seg, np.zeros(6))
    s = MetricState(np.eye(3), np.array([r, 0, 0]), np.array([0, r * omega, 0]),
                    np.zeros(6), 0.0)
    R_hat, p_hat, v_hat = predict_state(s, p, G, 0.0, duration)
    p_true = np.array([r * np.cos(omega * duration), r * np.sin(omega * duration), 0])
    v_true = np.array([-r * omega * np.sin(omega * duration),
                       r * omega * np.cos(omega * duration), 0])
    assert np.abs(p_hat - p_true).max() < 1e-6
    assert np.abs(v_hat - v_true).max() < 1e-6


def test_concatenated_intervals_equal_union():
    seg = synth_segment(rate=1000.0, duration=0.25, seed=7)
    bias = np.array([0.01, 0.0, -0.01, 0.001, 0.0, -0.001])
    full = integrate_stream(seg, bias)
    t_mid = seg.t[125]
    first = integrate_stream(seg.segment(seg.t[0], t_mid), bias)
    second = integrate_stream(seg.segment(t_mid, seg.t[-1]), bias)
    # delta composition oracle
    dR = first.dR @ second.dR
    dv = first.dv + first.dR @ second.dv
    dp = first.dp + first.dv * second.dt_total + first.dR @ second.dp
    assert np.abs(dR - full.dR).max() < 1e-10
    assert np.abs(dv - full.dv).max() < 1e-10
    assert np.abs(dp - full.dp).max() < 1e-10


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(9)
    p = Preintegrated(noise=ImuNoise())
    for _ in range(1000):
        p = integrate(p, rng.standard_normal(3), rng.standard_normal(3) * 3, 0.005)
    assert np.abs(p.cov - p.cov.T).max() < 1e-18
    assert np.linalg.eigvalsh(p.cov).min() > -1e-15


def test_information_matrix_floors_singular_covariance():
    p = Preintegrated()
    info = information_matrix(p)
    assert np.all(np.isfinite(info))
    assert np.linalg.eigvalsh(info).min() > 0


def random_kf(rng, t):
    kf = KeyframeState(timestamp=t,
                       T_CfWf=Pose3(so3_exp(rng.standard_normal(3)), rng.standard_normal(3)))
    kf.v = rng.standard_normal(3) * 0.5
    kf.b = rng.standard_normal(6) * 1e-3
    return kf


def test_residuals_zero_at_prediction():
    from rsvio.state import MetricState
    seg = synth_segment(seed=11)
    bias = np.zeros(6)
    p = integrate_stream(seg, bias)
    rng = np.random.default_rng(11)
    R_i = so3_exp(rng.standard_normal(3))
    s_i = MetricState(R_i, rng.standard_normal(3), rng.standard_normal(3), bias, 0.0)
    R_hat, p_hat, v_hat = predict_state(s_i, p, G, 0.0, p.dt_total)
    s_j = MetricState(R_hat, p_hat, v_hat, bias, p.dt_total)
    r = imu_residuals(s_i, s_j, p, G)
    assert np.abs(r).max() < 1e-12


def test_position_residual_with_identity_rotation():
    from rsvio.state import MetricState
    p = Preintegrated()
    s_i = MetricState(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(6), 0.0)
    s_j = MetricState(np.eye(3), np.array([0.01, 0, 0]), np.zeros(3), np.zeros(6), 0.0)
    r = imu_residuals(s_i, s_j, p, G)
    assert np.allclose(r[6:9], [0.01, 0, 0], atol=1e-15)
    assert np.abs(np.delete(r, [6, 7, 8])).max() < 1e-15


def residual_from_states(kf_i, kf_j, sg, calib, preint):
    s_i = metric_state(kf_i, sg, calib)
    s_j = metric_state(kf_j, sg, calib)
    return imu_residuals(s_i, s_j, preint, calib.g, check_bias=False)


def test_residual_jacobians_match_finite_differences():
    rng = np.random.default_rng(13)
    seg = synth_segment(seed=13)
    calib = default_calib(rng)
    h = 1e-6
    worst = 0.0
    for _ in range(30):
        kf_i = random_kf(rng, 0.0)
        kf_j = random_kf(rng, seg.t[-1])
        sg = ScaleGravity(ScaledRot(rng.uniform(0.5, 2.0), so3_exp(rng.standard_normal(3))))
        preint = integrate_stream(seg, kf_i.b + rng.standard_normal(6) * 1e-4)

        s_i = metric_state(kf_i, sg, calib)
        s_j = metric_state(kf_j, sg, calib)
        A_i = sg.R @ kf_i.T_CfWf.R.T
        A_j = sg.R @ kf_j.T_CfWf.R.T
        J = imu_residual_jacobians(s_i, s_j, preint, calib.g, calib, sg.s,
                                   A_i, A_j, kf_i.T_CfWf.t, kf_j.T_CfWf.t,
                                   check_bias=False)

        def fd(perturb, dim):
            out = np.zeros((15, dim))
            for k in range(dim):
                e = np.zeros(dim)
                e[k] = h
                rp = residual_from_states(*perturb(+e), preint)
                rm = residual_from_states(*perturb(-e), preint)
                out[:, k] = (rp - rm) / (2 * h)
            return out

        def with_pose(which):
            def f(e):
                ki, kj = kf_i.copy(), kf_j.copy()
                tgt = ki if which == "i" else kj
                tgt.T_CfWf = Pose3.exp(e) @ tgt.T_CfWf
                return ki, kj, sg, calib
            return f

        def with_vec(attr, which):
            def f(e):
                ki, kj = kf_i.copy(), kf_j.copy()
                tgt = ki if which == "i" else kj
                setattr(tgt, attr, getattr(tgt, attr) + e)
                return ki, kj, sg, calib
            return f

        def with_sg(e):
            sg2 = sg.updated(e[0], e[1:4])
            return kf_i.copy(), kf_j.copy(), sg2, calib

        checks = [
            ("pose_i", fd(with_pose("i"), 6)),
            ("pose_j", fd(with_pose("j"), 6)),
            ("v_i", fd(with_vec("v", "i"), 3)),
            ("v_j", fd(with_vec("v", "j"), 3)),
            ("b_i", fd(with_vec("b", "i"), 6)),
            ("b_j", fd(with_vec("b", "j"), 6)),
            ("sg", fd(with_sg, 4)),
        ]
        for name, J_fd in checks:
            scale = max(1.0, np.abs(J_fd).max())
            err = np.abs(J[name] - J_fd).max() / scale
            worst = max(worst, err)
            assert err < 1e-5, f"{name}: rel err {err:.2e}"
    assert worst < 1e-5
