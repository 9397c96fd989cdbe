"""Gaussian-window SSIM with an analytic backward pass.

The standard formulation: local means/variances/covariance under an 11x11
Gaussian window (sigma 1.5), stability constants K1=0.01, K2=0.03 on a
unit dynamic range.  Windows are applied in "valid" mode (the score map
shrinks by the window radius on every side) so no padding convention
leaks into the statistic.  The mean score over the valid map and all
channels is returned.

The backward pass propagates through the elementwise algebra and the
window filters; the window adjoint embeds the valid-grid gradient into a
zero canvas and re-correlates (the Gaussian is symmetric, so correlation
is self-adjoint).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["ssim", "ssim_forward", "ssim_backward", "gaussian_window"]

DEFAULT_WINDOW = 11
DEFAULT_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def gaussian_window(size: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps of odd length ``size``."""
    if size % 2 != 1 or size < 3:
        raise ValueError("window size must be odd and >= 3")
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable window correlation, cropped to the valid region."""
    r = (g.size - 1) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _filter_valid_adjoint(grad: np.ndarray, g: np.ndarray, full_shape) -> np.ndarray:
    """Adjoint of :func:`_filter_valid` (symmetric kernel)."""
    r = (g.size - 1) // 2
    canvas = np.zeros(full_shape, dtype=grad.dtype)
    canvas[r:-r, r:-r] = grad
    canvas = correlate1d(canvas, g, axis=0, mode="constant")
    canvas = correlate1d(canvas, g, axis=1, mode="constant")
    return canvas


def ssim_forward(pred: np.ndarray, target: np.ndarray,
                 window: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA):
    """Mean SSIM of (W, H, C) images in [0, 1] plus a tape for the vjp."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("image shapes differ")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        target = target[:, :, None]
    w, h, nchan = pred.shape
    if w < window or h < window:
        raise ValueError(f"image {w}x{h} smaller than SSIM window {window}; "
                         "use a smaller odd window")
    g = gaussian_window(window, sigma).astype(pred.dtype)
    c1 = K1 * K1
    c2 = K2 * K2

    ctx = {"g": g, "shape": (w, h), "pred": pred, "target": target, "chans": []}
    total = 0.0
    for c in range(nchan):
        x, y = pred[:, :, c], target[:, :, c]
        mx = _filter_valid(x, g)
        my = _filter_valid(y, g)
        mxx = _filter_valid(x * x, g)
        myy = _filter_valid(y * y, g)
        mxy = _filter_valid(x * y, g)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        a1 = 2.0 * mx * my + c1
        a2 = 2.0 * cxy + c2
        b1 = mx * mx + my * my + c1
        b2 = vx + vy + c2
        s = (a1 * a2) / (b1 * b2)
        total += float(s.mean())
        ctx["chans"].append((mx, my, a1, a2, b1, b2, s))
    return total / nchan, ctx


def ssim_backward(ctx, grad_scalar: float = 1.0) -> np.ndarray:
    """Gradient of the mean SSIM score w.r.t. ``pred``."""
    g = ctx["g"]
    pred, target = ctx["pred"], ctx["target"]
    w, h = ctx["shape"]
    nchan = len(ctx["chans"])
    grad = np.zeros_like(pred)
    for c, (mx, my, a1, a2, b1, b2, s) in enumerate(ctx["chans"]):
        x, y = pred[:, :, c], target[:, :, c]
        ds = np.full(s.shape, grad_scalar / (s.size * nchan), dtype=pred.dtype)
        denom = b1 * b2
        da1 = ds * a2 / denom
        da2 = ds * a1 / denom
        db1 = -ds * s / b1
        db2 = -ds * s / b2
        dcxy = 2.0 * da2
        dvx = db2
        dmx = 2.0 * my * da1 + 2.0 * mx * db1 - 2.0 * mx * dvx - my * dcxy
        # mx = F(x), mxx = F(x^2), mxy = F(x*y)
        grad[:, :, c] = (_filter_valid_adjoint(dmx, g, (w, h))
                         + 2.0 * x * _filter_valid_adjoint(dvx, g, (w, h))
                         + y * _filter_valid_adjoint(dcxy, g, (w, h)))
    return grad


def ssim(pred: np.ndarray, target: np.ndarray,
         window: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> float:
    """Mean SSIM over channels and the valid score map."""
    value, _ = ssim_forward(pred, target, window=window, sigma=sigma)
    return value
