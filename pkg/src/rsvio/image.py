"""Image pyramid and C1 interpolation with consistent analytic gradients.

Sampling uses the Catmull-Rom bicubic kernel: the returned gradient is the
exact derivative of the interpolated surface, which keeps photometric
Jacobians consistent with finite differences of the sampled residuals.
Intensities are stored as float arrays on a 0..255 scale.
"""

from __future__ import annotations

import numpy as np


def build_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """2x2-average pyramid; level 0 is the input image."""
    img = np.asarray(img, dtype=float)
    out = [img]
    for _ in range(1, levels):
        prev = out[-1]
        h, w = prev.shape
        if h % 2 or w % 2:
            break
        out.append(prev.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3)))
    return out


def _cubic_weights(f: np.ndarray):
    """Catmull-Rom weights and their derivatives for taps at -1, 0, 1, 2."""
    f2 = f * f
    f3 = f2 * f
    w0 = -0.5 * f3 + f2 - 0.5 * f
    w1 = 1.5 * f3 - 2.5 * f2 + 1.0
    w2 = -1.5 * f3 + 2.0 * f2 + 0.5 * f
    w3 = 0.5 * f3 - 0.5 * f2
    d0 = -1.5 * f2 + 2.0 * f - 0.5
    d1 = 4.5 * f2 - 5.0 * f
    d2 = -4.5 * f2 + 4.0 * f + 0.5
    d3 = 1.5 * f2 - f
    w = np.stack([w0, w1, w2, w3], axis=-1)
    d = np.stack([d0, d1, d2, d3], axis=-1)
    return w, d


def in_bounds_mask(img_shape, x: np.ndarray, y: np.ndarray,
                   margin: float = 0.0) -> np.ndarray:
    h, w = img_shape
    lo = 1.0 + margin
    return ((x >= lo) & (x <= w - 3.0 - margin)
            & (y >= lo) & (y <= h - 3.0 - margin))


def interp_bicubic(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample img at (x, y); returns (value, grad_x, grad_y, valid).

    Out-of-bounds samples return 0 with valid=False. Coordinates follow the
    pixel-center convention (integer coordinates hit pixel centers).
    """
    img = np.asarray(img, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h, w = img.shape
    valid = in_bounds_mask(img.shape, x, y)

    xs = np.where(valid, x, 2.0)
    ys = np.where(valid, y, 2.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    wx, dx = _cubic_weights(fx)
    wy, dy = _cubic_weights(fy)

    # gather 4x4 neighborhoods: rows y0-1..y0+2, cols x0-1..x0+2
    offs = np.arange(-1, 3)
    yy = y0[..., None] + offs          # (..., 4)
    xx = x0[..., None] + offs
    patch = img[yy[..., :, None], xx[..., None, :]]   # (..., 4, 4)

    row_vals = np.einsum("...ij,...j->...i", patch, wx)      # interp along x
    row_dx = np.einsum("...ij,...j->...i", patch, dx)
    val = np.einsum("...i,...i->...", row_vals, wy)
    gx = np.einsum("...i,...i->...", row_dx, wy)
    gy = np.einsum("...i,...i->...", row_vals, dy)

    val = np.where(valid, val, 0.0)
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    return val, gx, gy, valid


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude (used for point selection)."""
    img = np.asarray(img, dtype=float)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return np.sqrt(gx * gx + gy * gy)
