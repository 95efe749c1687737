import numpy as np
import pytest

from rsvio.camera import (
    BehindCameraError,
    CameraError,
    CameraModel,
    DistortionDomainError,
    InvalidDepthError,
    load_camera_yaml,
    save_camera_yaml,
)


def make_cam(**kw):
    base = dict(fx=400.0, fy=400.0, cx=640.0, cy=512.0,
                width=1280, height=1024, row_time_td=29.47e-6)
    base.update(kw)
    return CameraModel(**base)


def test_distort_is_identity_without_coefficients():
    cam = make_cam()
    pts = np.array([[100.0, 200.0], [640.0, 512.0], [1000.0, 900.0]])
    out, valid = cam.distort_batch(pts)
    assert valid.all()
    assert np.abs(out - pts).max() < 1e-12


def test_principal_point_fixed_under_radtan():
    cam = make_cam(k1=-0.3, k2=0.1, p1=0.01, p2=-0.02)
    out = cam.distort(np.array([640.0, 512.0]))
    assert np.abs(out - [640.0, 512.0]).max() < 1e-12


def test_distort_matches_polynomial_oracle():
    # k1=-0.1 at (cx+100, cy): xn=0.25, r2=0.0625, radial=0.99375
    # -> x = cx + fx*0.25*0.99375 = 739.375 (hand-evaluated polynomial)
    cam = make_cam(k1=-0.1)
    out = cam.distort(np.array([740.0, 512.0]))
    assert np.abs(out - [739.375, 512.0]).max() < 1e-12


def test_distort_rejects_out_of_domain():
    cam = make_cam(k1=-0.1)
    with pytest.raises(DistortionDomainError):
        cam.distort(np.array([50000.0, 512.0]))


def test_undistort_round_trip_over_grid():
    cam = make_cam(k1=-0.28, k2=0.07, p1=1e-4, p2=-2e-4)
    xs = np.linspace(5, cam.width - 5, 40)
    ys = np.linspace(5, cam.height - 5, 32)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    dist, valid = cam.distort_batch(pts)
    assert valid.all()
    back = cam.undistort(dist)
    assert np.abs(back - pts).max() < 1e-6


def test_distort_jacobian_matches_finite_differences():
    cam = make_cam(k1=-0.28, k2=0.07, p1=1e-3, p2=-2e-3)
    rng = np.random.default_rng(5)
    pts = np.stack([rng.uniform(100, 1180, 50), rng.uniform(100, 920, 50)], axis=-1)
    J = cam.distort_jacobian(pts)
    h = 1e-5
    for axis in range(2):
        dp = np.zeros(2)
        dp[axis] = h
        fp, _ = cam.distort_batch(pts + dp)
        fm, _ = cam.distort_batch(pts - dp)
        fd = (fp - fm) / (2 * h)
        assert np.abs(J[..., axis] - fd).max() < 1e-6


def test_capture_time_zero_at_mid_row():
    cam = make_cam()
    assert cam.capture_time(np.array([300.0, cam.y0])) == pytest.approx(0.0, abs=1e-12)


def test_capture_time_rows_below_middle():
    cam = make_cam()
    t = cam.capture_time(np.array([300.0, cam.y0 + 12.0]))
    assert t == pytest.approx(12.0, abs=1e-12)


def test_capture_time_physical_offset():
    # 100 rows at 29.47 us/row -> 2.947 ms
    cam = make_cam()
    t_rows = cam.capture_time(np.array([640.0, cam.y0 + 100.0]))
    assert t_rows * cam.row_time_td == pytest.approx(2.947e-3, rel=1e-12)


def test_capture_time_global_shutter_short_circuits():
    cam = make_cam(row_time_td=0.0)
    t, valid = cam.capture_time_batch(np.array([[10.0, 10.0], [640.0, 1000.0]]))
    assert valid.all()
    assert np.all(t == 0.0)
    assert np.all(cam.capture_time_gradient(np.array([640.0, 1000.0])) == 0.0)


def test_capture_time_readout_sign():
    cam = make_cam(readout_sign=-1.0)
    t = cam.capture_time(np.array([300.0, cam.y0 + 12.0]))
    assert t == pytest.approx(-12.0, abs=1e-12)


def test_capture_time_monotone_in_y():
    cam = make_cam(k1=-0.28, k2=0.07)
    assert cam.validate_readout_monotonic()


def test_project_center_and_offset():
    cam = make_cam()
    assert np.allclose(cam.project(np.array([0.0, 0.0, 1.0])), [640.0, 512.0])
    assert np.allclose(cam.project(np.array([1.0, 0.0, 2.0])), [840.0, 512.0])


def test_project_rejects_behind_camera():
    cam = make_cam()
    with pytest.raises(BehindCameraError):
        cam.project(np.array([0.0, 0.0, -0.5]))
    with pytest.raises(BehindCameraError):
        cam.project(np.array([0.0, 0.0, 0.0]))


def test_unproject_project_round_trip():
    cam = make_cam()
    rng = np.random.default_rng(9)
    for _ in range(100):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.3, 10)])
        uv = cam.project(p)
        p2 = cam.unproject(uv, 1.0 / p[2])
        assert np.abs(p2 / np.linalg.norm(p2) - p / np.linalg.norm(p)).max() < 1e-9
        assert np.abs(p2 - p).max() < 1e-9


def test_unproject_rejects_nonpositive_depth():
    cam = make_cam()
    with pytest.raises(InvalidDepthError):
        cam.unproject(np.array([100.0, 100.0]), 0.0)
    with pytest.raises(InvalidDepthError):
        cam.unproject(np.array([100.0, 100.0]), -0.1)


def test_project_jacobian_matches_finite_differences():
    cam = make_cam()
    rng = np.random.default_rng(11)
    p = np.stack([rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30), rng.uniform(0.5, 5, 30)], axis=-1)
    J = cam.project_jacobian(p)
    h = 1e-6
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = h
        fp, _ = cam.project_batch(p + dp)
        fm, _ = cam.project_batch(p - dp)
        fd = (fp - fm) / (2 * h)
        assert np.abs(J[..., axis] - fd).max() < 1e-5


def test_scaled_camera_consistent_rows():
    cam = make_cam()
    half = cam.scaled(1)
    assert half.width == cam.width // 2 and half.height == cam.height // 2
    # same physical point, same full-res capture time
    uv_full = np.array([700.0, 800.0])
    uv_half = np.array([(700.0 + 0.5) / 2 - 0.5, (800.0 + 0.5) / 2 - 0.5])
    t_full = cam.capture_time(uv_full)
    t_half = half.capture_time(uv_half)
    assert t_half == pytest.approx(t_full, abs=1e-9)


def test_calibration_file_round_trip(tmp_path):
    cam = make_cam(k1=-0.1, k2=0.02, p1=1e-4, p2=-3e-4)
    path = tmp_path / "camera.yaml"
    save_camera_yaml(path, cam)
    cam2 = load_camera_yaml(path)
    for key in ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2",
                "width", "height", "row_time_td", "readout_sign"):
        assert getattr(cam2, key) == getattr(cam, key)


def test_calibration_file_rejects_unknown_keys(tmp_path):
    path = tmp_path / "camera.yaml"
    path.write_text("fx: 400\nfy: 400\ncx: 320\ncy: 240\nk1: 0\nk2: 0\np1: 0\np2: 0\n"
                    "width: 640\nheight: 480\nrow_time_td: 0\nreadout_sign: 1\nbogus: 3\n")
    with pytest.raises(CameraError, match="unknown"):
        load_camera_yaml(path)


def test_calibration_file_rejects_missing_keys(tmp_path):
    path = tmp_path / "camera.yaml"
    path.write_text("fx: 400\nfy: 400\n")
    with pytest.raises(CameraError, match="missing"):
        load_camera_yaml(path)


def test_invalid_camera_parameters_rejected():
    with pytest.raises(CameraError):
        make_cam(fx=-1.0)
    with pytest.raises(CameraError):
        make_cam(row_time_td=-1e-6)
    with pytest.raises(CameraError):
        make_cam(readout_sign=2.0)
