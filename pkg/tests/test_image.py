import numpy as np

from rsvio.image import build_pyramid, gradient_magnitude, in_bounds_mask, interp_bicubic


def smooth_field(h, w, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w))
    for _ in range(6):
        fx, fy = rng.uniform(0.01, 0.06, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(10, 40) * np.sin(2 * np.pi * (fx * xs + fy * ys) + ph)
    return img + 128.0


def test_interpolation_exact_on_grid_points():
    img = smooth_field(32, 40)
    xs = np.arange(2, 37, dtype=float)
    ys = np.full_like(xs, 7.0)
    val, _, _, valid = interp_bicubic(img, xs, ys)
    assert valid.all()
    assert np.abs(val - img[7, 2:37]).max() < 1e-12


def test_interpolation_reproduces_linear_ramps():
    ys, xs = np.mgrid[0:20, 0:30]
    img = 3.0 * xs + 2.0 * ys + 5.0
    rng = np.random.default_rng(1)
    x = rng.uniform(2, 26, 100)
    y = rng.uniform(2, 16, 100)
    val, gx, gy, valid = interp_bicubic(img, x, y)
    assert valid.all()
    assert np.abs(val - (3 * x + 2 * y + 5)).max() < 1e-10
    assert np.abs(gx - 3.0).max() < 1e-10
    assert np.abs(gy - 2.0).max() < 1e-10


def test_gradient_matches_finite_differences_of_interpolant():
    img = smooth_field(48, 64, seed=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(3, 60, 200)
    y = rng.uniform(3, 44, 200)
    _, gx, gy, _ = interp_bicubic(img, x, y)
    h = 1e-6
    vp, _, _, _ = interp_bicubic(img, x + h, y)
    vm, _, _, _ = interp_bicubic(img, x - h, y)
    assert np.abs((vp - vm) / (2 * h) - gx).max() < 1e-5
    vp, _, _, _ = interp_bicubic(img, x, y + h)
    vm, _, _, _ = interp_bicubic(img, x, y - h)
    assert np.abs((vp - vm) / (2 * h) - gy).max() < 1e-5


def test_out_of_bounds_flagged():
    img = smooth_field(16, 16)
    val, gx, gy, valid = interp_bicubic(img, np.array([0.5, 8.0, 15.5]), np.array([8.0, 8.0, 8.0]))
    assert list(valid) == [False, True, False]
    assert val[0] == 0.0 and gx[0] == 0.0 and gy[0] == 0.0


def test_in_bounds_margin():
    m = in_bounds_mask((20, 20), np.array([3.0]), np.array([3.0]), margin=2.5)
    assert not m[0]
    m = in_bounds_mask((20, 20), np.array([4.0]), np.array([4.0]), margin=2.5)
    assert m[0]


def test_pyramid_shapes_and_means():
    img = smooth_field(64, 96)
    pyr = build_pyramid(img, 4)
    assert [p.shape for p in pyr] == [(64, 96), (32, 48), (16, 24), (8, 12)]
    assert np.allclose(pyr[1][0, 0], img[:2, :2].mean())
    assert np.allclose(pyr[0].mean(), pyr[3].mean())


def test_gradient_magnitude_on_ramp():
    ys, xs = np.mgrid[0:10, 0:10]
    g = gradient_magnitude(3.0 * xs + 4.0 * ys)
    assert np.abs(g[1:-1, 1:-1] - 5.0).max() < 1e-12
